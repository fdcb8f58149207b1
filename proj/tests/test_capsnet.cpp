#include <doctest.h>

#include <cmath>
#include <fstream>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/checkpoint.hpp"
#include "cropdoc/errors.hpp"
#include "support.hpp"

using namespace cropdoc;
using testing::random_tensor;

namespace {

double norm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

NetworkConfig tiny_config() {
  NetworkConfig c;
  c.bands = 8;
  c.spectral_kernels = 4;
  c.spatial_kernels = 4;
  c.capsules = 3;
  c.capsule_dim = 4;
  c.class_dim = 4;
  c.patch = 3;
  c.kernel = 3;
  c.routing_iters = 2;
  c.decoder_hidden = 8;
  return c;
}

// Straight-line single-iteration routing for one sample:
// u_hat = W u + B, c = 1/C, s = sum_m c u_hat, v = squash(s).
std::vector<std::vector<double>> oracle_one_iteration(const std::vector<std::vector<double>>& u,
                                                      const Tensor& w, const Tensor& b, std::size_t classes,
                                                      std::size_t dim) {
  const std::size_t z = u.size(), k = u[0].size();
  std::vector<std::vector<double>> v(classes, std::vector<double>(dim, 0.0));
  for (std::size_t n = 0; n < classes; ++n) {
    std::vector<double> s(dim, 0.0);
    for (std::size_t m = 0; m < z; ++m) {
      for (std::size_t d = 0; d < dim; ++d) {
        double uh = b[n * dim + d];
        for (std::size_t j = 0; j < k; ++j) uh += w[((m * classes + n) * dim + d) * k + j] * u[m][j];
        s[d] += uh / static_cast<double>(classes);
      }
    }
    const double r2 = s[0] * s[0] + s[1] * s[1];
    const double r = std::sqrt(r2);
    for (std::size_t d = 0; d < dim; ++d) v[n][d] = r2 / (1.0 + r2) * s[d] / r;
  }
  return v;
}

}  // namespace

TEST_CASE("squash closed forms and properties") {
  CHECK(squash(std::vector<double>{0, 0, 0}) == std::vector<double>{0, 0, 0});
  const auto half = squash(std::vector<double>{0.6, 0.8});
  CHECK(half[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(half[1] == doctest::Approx(0.4).epsilon(1e-12));
  const auto ten = squash(std::vector<double>{6, 8});
  CHECK(std::abs(norm(ten) - 100.0 / 101.0) < 1e-12);
  CHECK(std::abs(ten[0] / ten[1] - 0.75) < 1e-12);

  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> u(5);
    const double sc = std::pow(10.0, rng.uniform(-3, 3));
    for (double& x : u) x = sc * rng.uniform(-1, 1);
    const auto v = squash(u);
    double dot = 0;
    for (std::size_t j = 0; j < u.size(); ++j) dot += u[j] * v[j];
    CHECK(std::abs(dot / (norm(u) * norm(v)) - 1.0) < 1e-12);
    CHECK(norm(v) < 1.0);
  }
}

TEST_CASE("routing examples") {
  SUBCASE("first iteration coefficients are uniform and rows sum to one") {
    Rng rng(5);
    CapsuleTensor caps{random_tensor({4, 3}, rng, -0.3, 0.3), true};
    const Tensor w = random_tensor({4, 3, 2, 3}, rng), b = random_tensor({3, 2}, rng);
    const RoutingTrace t = route(caps, w, b, 3);
    for (double c : t.coefficients[0].data()) CHECK(c == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    for (const Tensor& c : t.coefficients) {
      for (std::size_t m = 0; m < 4; ++m) CHECK(std::abs(c[m * 3] + c[m * 3 + 1] + c[m * 3 + 2] - 1.0) < 1e-12);
    }
    CHECK(t.activations.size() == 3);
  }
  SUBCASE("single parent capsule") {
    Rng rng(6);
    CapsuleTensor caps{random_tensor({1, 2}, rng, -0.3, 0.3), true};
    const RoutingTrace t = route(caps, random_tensor({1, 3, 2, 2}, rng), random_tensor({3, 2}, rng), 2);
    const Tensor& c = t.coefficients.back();
    CHECK(std::abs(c[0] + c[1] + c[2] - 1.0) < 1e-12);
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t d = 0; d < 2; ++d) {
        CHECK(t.preactivations.back()[n * 2 + d] == doctest::Approx(c[n] * t.predictions[n * 2 + d]).epsilon(1e-14));
      }
    }
  }
  SUBCASE("hand oracle, two capsules, two classes, one iteration") {
    const std::vector<std::vector<double>> u{{0.3, -0.1}, {0.2, 0.4}};
    CapsuleTensor caps{Tensor({2, 2}, {0.3, -0.1, 0.2, 0.4}), true};
    const Tensor w({2, 2, 2, 2}, {0.5, -0.2, 0.1, 0.9, -0.7, 0.3, 0.8, 0.05, 0.25, 0.6, -0.4, 0.35, 0.15, -0.55, 0.45, 0.2});
    const Tensor b({2, 2}, {0.01, -0.02, 0.03, 0.04});
    const auto expect = oracle_one_iteration(u, w, b, 2, 2);
    const RoutingTrace t = route(caps, w, b, 1);
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t d = 0; d < 2; ++d) CHECK(std::abs(t.activations[0][n * 2 + d] - expect[n][d]) < 1e-12);
    }
  }
  SUBCASE("errors") {
    CapsuleTensor caps{Tensor({2, 2}, 0.1), false};
    CHECK_THROWS_AS(route(caps, Tensor({2, 2, 2, 2}), Tensor({2, 2}), 1), ArgumentError);
    caps.squashed = true;
    CHECK_THROWS_AS(route(caps, Tensor({2, 2, 2, 2}), Tensor({2, 2}), 0), ConfigError);
  }
}

TEST_CASE("routing invariants over random instances") {
  Rng rng(7);
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t z = 1 + rng.below(5), k = 1 + rng.below(4), c = 2 + rng.below(3), d = 1 + rng.below(4);
    Tensor raw = random_tensor({z, k}, rng, -2, 2);
    Tensor sq({z, k});
    for (std::size_t m = 0; m < z; ++m) {
      const auto v = squash(raw.data().subspan(m * k, k));
      std::copy(v.begin(), v.end(), sq.data().begin() + static_cast<std::ptrdiff_t>(m * k));
    }
    const RoutingTrace t = route({sq, true}, random_tensor({z, c, d, k}, rng, -2, 2), random_tensor({c, d}, rng), 3);
    for (const Tensor& coeff : t.coefficients) {
      for (std::size_t m = 0; m < z; ++m) {
        double s = 0;
        for (std::size_t n = 0; n < c; ++n) s += coeff[m * c + n];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
    for (const Tensor& v : t.activations) {
      for (std::size_t n = 0; n < c; ++n) CHECK(norm(v.data().subspan(n * d, d)) < 1.0);
    }
  }
}

TEST_CASE("best-agreeing log prior is non-decreasing across iterations") {
  CapsuleTensor caps{Tensor({2, 2}, {0.3, -0.1, 0.2, 0.4}), true};
  const Tensor w({2, 2, 2, 2}, {0.5, -0.2, 0.1, 0.9, -0.7, 0.3, 0.8, 0.05, 0.25, 0.6, -0.4, 0.35, 0.15, -0.55, 0.45, 0.2});
  const Tensor b({2, 2}, {0.01, -0.02, 0.03, 0.04});
  const RoutingTrace t = route(caps, w, b, 4);
  // Pair with the largest final log prior.
  const Tensor& last = t.log_priors.back();
  std::size_t best = 0;
  for (std::size_t i = 1; i < last.size(); ++i) {
    if (last[i] > last[best]) best = i;
  }
  for (std::size_t it = 1; it < t.log_priors.size(); ++it) CHECK(t.log_priors[it][best] >= t.log_priors[it - 1][best]);
}

TEST_CASE("margin and total loss") {
  LossConfig cfg;
  CHECK(margin_loss(std::vector<double>{0.95, 0.05, 0.05, 0.05}, 0, cfg) == 0.0);
  CHECK(margin_loss(std::vector<double>{0.0, 0.0, 0.0, 0.0}, 0, cfg) == doctest::Approx(0.81));
  CHECK(margin_loss(std::vector<double>{0.95, 0.6, 0.05, 0.05}, 0, cfg) == doctest::Approx(0.125));

  const std::vector<double> target{1, 0, 0, 0};
  CHECK(total_loss(0.3, target, target, cfg) == 0.3);
  // MSE 0.25: every component off by 0.5.
  CHECK(total_loss(0.81, std::vector<double>{0.5, 0.5, 0.5, 0.5}, target, cfg) == doctest::Approx(0.810125).epsilon(1e-12));
  LossConfig no_recon = cfg;
  no_recon.theta = 0.0;
  CHECK(total_loss(0.4, std::vector<double>{0.9, 0.9, 0.9, 0.9}, target, no_recon) == 0.4);

  LossConfig bad = cfg;
  bad.edge_minus = 0.95;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batched margin loss matches the per-sample helper") {
  Rng rng(8);
  Tape tape;
  const Tensor v = random_tensor({3, 4, 2}, rng, -0.6, 0.6);
  const std::vector<std::size_t> labels{2, 0, 3};
  LossConfig cfg;
  double expect = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    std::vector<double> norms;
    for (std::size_t c = 0; c < 4; ++c) norms.push_back(norm(v.data().subspan((n * 4 + c) * 2, 2)));
    expect += margin_loss(norms, labels[n], cfg) / 3.0;
  }
  CHECK(margin_loss(tape.constant(v), labels, cfg).value()[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("classification from norms") {
  const Prediction p = classify_norms(std::vector<double>{0.1, 0.9, 0.2, 0.1});
  CHECK(p.label == 1);
  CHECK(p.confidence == 0.9);
  CHECK(classify_norms(std::vector<double>{0.4, 0.7, 0.7, 0.1}).label == 1);
  CHECK(classify_norms(std::vector<double>{0.2, 0.3, 0.25}).label == classify_norms(std::vector<double>{0.4, 0.6, 0.5}).label);
}

TEST_CASE("network config validation") {
  NetworkConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.routing_iters = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.kernel = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.receptive_field = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.receptive_field = 9;  // wider than the 8 bands
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("layer shapes and ranges") {
  Rng rng(9);
  for (std::size_t bands : {8, 12, 20}) {
    NetworkConfig c = tiny_config();
    c.bands = bands;
    CapsNet net(c, 3);
    Tape tape;
    const Tensor batch = random_tensor({5, 3, 3, bands}, rng, 0, 1);
    const CapsNet::Forward f = net.forward(tape, batch, NormMode::train);
    CHECK(f.spectral.shape() == Shape{5, 3, 3, 4});
    CHECK(f.spectral_spatial.shape() == Shape{5, 1, 1, 4});
    CHECK(f.capsules.shape() == Shape{5, 3, 4});
    CHECK(f.activations.shape() == Shape{5, 4, 4});
    CHECK(f.norms.shape() == Shape{5, 4});
    for (double x : f.spectral.value().data()) CHECK(x >= 0.0);
    for (double x : f.spectral_spatial.value().data()) CHECK(x >= 0.0);
    for (std::size_t i = 0; i < 15; ++i) CHECK(norm(f.capsules.value().data().subspan(i * 4, 4)) < 1.0);
    for (double x : f.norms.value().data()) CHECK(x < 1.0);
  }
}

TEST_CASE("default configuration shapes") {
  NetworkConfig c;
  c.bands = 16;  // keep the test quick; other defaults as configured
  CapsNet net(c, 1);
  Tape tape;
  Rng rng(10);
  const CapsNet::Forward f = net.infer(tape, random_tensor({1, 13, 13, 16}, rng, 0, 1));
  CHECK(f.spectral.shape() == Shape{1, 13, 13, 128});
  CHECK(f.spectral_spatial.shape() == Shape{1, 1, 1, 64});
  CHECK(f.capsules.shape() == Shape{1, 32, 16});
  CHECK(f.activations.shape() == Shape{1, 4, 16});
}

TEST_CASE("zero input propagates as zeros through the encoders") {
  CapsNet net(tiny_config(), 4);
  Tape tape;
  const CapsNet::Forward f = net.infer(tape, Tensor({2, 3, 3, 8}));
  for (double x : f.spectral.value().data()) CHECK(x == 0.0);
  for (double x : f.spectral_spatial.value().data()) CHECK(x == 0.0);
  for (double x : f.capsules.value().data()) CHECK(x == 0.0);
}

TEST_CASE("decoder outputs") {
  CapsNet net(tiny_config(), 5);
  net.dec2_b = Tensor({4}, {-1.0, 0.0, 0.5, 2.0});
  Tape tape;
  Var zero = tape.constant(Tensor({1, 4, 4}));
  const std::vector<std::size_t> sel{2};
  const Var out = net.decode(tape, zero, sel);
  CHECK(out.shape() == Shape{1, 4});
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.value()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-net.dec2_b[i]))));

  Rng rng(11);
  Var v = tape.constant(random_tensor({3, 4, 4}, rng));
  const std::vector<std::size_t> sel3{0, 1, 3};
  for (double x : net.decode(tape, v, sel3).value().data()) CHECK((x > 0.0 && x < 1.0));
}

TEST_CASE("predict") {
  CapsNet net(tiny_config(), 6);
  Rng rng(12);
  const Tensor batch = random_tensor({4, 3, 3, 8}, rng, 0, 1);
  const auto preds = net.predict(batch);
  REQUIRE(preds.size() == 4);
  for (const Prediction& p : preds) {
    CHECK(p.norms.size() == 4);
    for (double n : p.norms) CHECK(n < 1.0);
    CHECK(p.confidence == *std::max_element(p.norms.begin(), p.norms.end()));
  }
  CHECK_THROWS_AS(net.predict(random_tensor({1, 5, 5, 8}, rng)), DimensionError);
  CHECK_THROWS_AS(net.predict_one(random_tensor({3, 3, 9}, rng)), DimensionError);
  // Inference is per sample: one patch alone gives the same norms as in the batch.
  const std::size_t stride = 3 * 3 * 8;
  Tensor single({3, 3, 8});
  std::copy_n(batch.data().begin() + 2 * stride, stride, single.data().begin());
  CHECK(net.predict_one(single).norms == preds[2].norms);
}

TEST_CASE("end-to-end gradient on the tiny configuration") {
  Rng rng(13);
  LossConfig cfg;
  cfg.theta = 0.05;  // make the reconstruction path visible in the gradient
  testing::GradError worst;
  for (int draw = 0; draw < 20; ++draw) {
    CapsNet net(tiny_config(), 100 + draw);
    // Zero decoder bias on near-zero class capsules would park the hidden
    // pre-activations on the relu kink.
    const Tensor bias = testing::random_nonzero(net.dec1_b.shape(), rng);
    std::copy(bias.data().begin(), bias.data().end(), net.dec1_b.data().begin());
    const Tensor batch = random_tensor({4, 3, 3, 8}, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 1, 2, 3};
    const auto e = testing::network_grad_error(net, batch, labels, cfg);
    worst.relative = std::max(worst.relative, e.relative);
    worst.absolute = std::max(worst.absolute, e.absolute);
  }
  CHECK(worst.relative < 1e-3);
  CHECK(worst.absolute < 1e-6);
}

TEST_CASE("parameter bookkeeping") {
  CapsNet net(tiny_config(), 1);
  std::size_t total = 0;
  for (auto& p : net.parameters()) total += p.tensor->size();
  CHECK(net.parameter_count() == total);
  // Blocks add the three batch-norm running statistics pairs.
  CHECK(net.blocks().size() == net.parameters().size() + 6);
  CapsNet same(tiny_config(), 1), other(tiny_config(), 2);
  CHECK(same.conv1_w.data()[0] == net.conv1_w.data()[0]);
  CHECK(other.route_w.data()[0] != net.route_w.data()[0]);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testing::scratch_dir("capsnet_ckpt");
  CapsNet net(tiny_config(), 21);
  // Non-trivial batch-norm statistics.
  Rng rng(22);
  {
    Tape tape;
    net.forward(tape, random_tensor({6, 3, 3, 8}, rng, 0, 1), NormMode::train);
  }
  const Tensor batch = random_tensor({5, 3, 3, 8}, rng, 0, 1);
  save_checkpoint(net, dir / "a.ckpt");
  const CapsNet once = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(once, dir / "b.ckpt");
  const CapsNet twice = load_checkpoint(dir / "b.ckpt");
  CHECK(once.config() == net.config());

  const auto p0 = net.predict(batch), p1 = once.predict(batch), p2 = twice.predict(batch);
  for (std::size_t i = 0; i < p0.size(); ++i) {
    CHECK(p1[i].norms == p2[i].norms);  // bitwise once values are float32
    CHECK(p1[i].label == p0[i].label);
    for (std::size_t c = 0; c < p0[i].norms.size(); ++c) CHECK(std::abs(p1[i].norms[c] - p0[i].norms[c]) < 1e-5);
  }
  std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
}

TEST_CASE("checkpoint format errors") {
  const auto dir = testing::scratch_dir("capsnet_ckpt_err");
  CapsNet net(tiny_config(), 23);
  save_checkpoint(net, dir / "ok.ckpt");
  std::ifstream in(dir / "ok.ckpt", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return dir / name;
  };
  CHECK_THROWS_AS(load_checkpoint(write("magic.ckpt", "NOT-A-CHECKPOINT\n" + bytes.substr(19))), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("trunc.ckpt", bytes.substr(0, bytes.size() - 7))), FormatError);
  std::string version = bytes;
  version.replace(version.find("version=1"), 9, "version=9");
  CHECK_THROWS_AS(load_checkpoint(write("version.ckpt", version)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), FormatError);
}
