#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cropdoc/checkpoint.hpp"
#include "cropdoc/evaluation.hpp"
#include "cropdoc/hsi.hpp"
#include "cropdoc/synthetic.hpp"
#include "support.hpp"

using namespace cropdoc;
namespace fs = std::filesystem;

namespace {

const fs::path kData = CROPDOC_TEST_DATA;

struct Run {
  int code = -1;
  std::string out;
};

// Runs the cropdoc binary with `args`, capturing stdout; stderr is discarded.
Run run_cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + CROPDOC_CLI + "\" " + args + " > \"" + log.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  r.out.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small network and schedule for quick CLI runs.
void write_train_config(const fs::path& p, std::size_t epochs) {
  std::ofstream out(p);
  out << "spectral_kernels = 4\nspatial_kernels = 4\ncapsules = 4\ncapsule_dim = 4\nclass_dim = 4\n"
      << "patch = 5\nkernel = 5\nreceptive_field = 3\ndecoder_hidden = 8\n"
      << "epochs = " << epochs << "\nbatch_size = 32\nmax_patches = 200\nmax_val_patches = 60\n";
}

}  // namespace

TEST_CASE("synth") {
  const fs::path dir = testing::scratch_dir("cli_synth");
  const Run a = run_cli("synth --spec " + q(kData / "small_scene.cfg") + " --cube " + q(dir / "a.hsic") +
                            " --labels " + q(dir / "a.hsil") + " --seed 5",
                        dir);
  REQUIRE(a.code == 0);
  const Run b = run_cli("synth --config " + q(kData / "small_scene.cfg") + " --cube " + q(dir / "b.hsic") +
                            " --labels " + q(dir / "b.hsil") + " --seed 5",
                        dir);
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "a.hsic") == slurp(dir / "b.hsic"));
  CHECK(slurp(dir / "a.hsil") == slurp(dir / "b.hsil"));
  CHECK(a.out == b.out);

  // Histogram lines sum to H*W.
  std::istringstream in(a.out);
  std::string name;
  std::size_t count = 0, sum = 0, total = 0;
  while (in >> name >> count) (name == "total" ? total : sum) += count;
  CHECK(total == 24 * 24);
  CHECK(sum == total);
  CHECK(read_cube(dir / "a.hsic").bands() == 16);

  CHECK(run_cli("synth --spec " + q(dir / "nope.cfg") + " --cube x --labels y", dir).code == 2);
  CHECK(run_cli("synth --cube " + q(dir / "x.hsic") + " --labels " + q(dir / "x.hsil"), dir).code == 2);
  std::ofstream(dir / "bad.cfg") << "height = 8\nthis line has no equals sign\n";
  CHECK(run_cli("synth --spec " + q(dir / "bad.cfg") + " --cube x --labels y", dir).code == 2);
  std::ofstream(dir / "unknown.cfg") << "height = 8\nheigth = 9\n";
  CHECK(run_cli("synth --spec " + q(dir / "unknown.cfg") + " --cube x --labels y", dir).code == 2);
  CHECK(run_cli("frobnicate", dir).code == 2);
}

TEST_CASE("eval on the field-study fixture") {
  const fs::path dir = testing::scratch_dir("cli_eval");
  const Run r = run_cli("eval --pred " + q(kData / "field_pred.hsil") + " --truth " + q(kData / "field_truth.hsil") +
                            " --out " + q(dir / "m.csv"),
                        dir);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("oa 0.97 ") == 0);
  const std::string csv = slurp(dir / "m.csv");
  CHECK(csv.find("\noverall,") != std::string::npos);
  CHECK(csv.find(",0.97,") != std::string::npos);

  // Identical maps: OA 1 and a McNemar report with an undefined statistic.
  const Run same = run_cli("eval --pred " + q(kData / "field_truth.hsil") + " --truth " +
                               q(kData / "field_truth.hsil") + " --pred-b " + q(kData / "field_truth.hsil") +
                               " --out " + q(dir / "same.csv"),
                           dir);
  REQUIRE(same.code == 0);
  CHECK(same.out.find("oa 1 ") == 0);
  CHECK(slurp(dir / "same.csv.mcnemar.txt").find("chi_square=undefined") != std::string::npos);

  // 64x64 map with 40 px cells.
  write_labels(LabelMap(64, 64, kHealthy), dir / "g.hsil");
  const Run g = run_cli("eval --pred " + q(dir / "g.hsil") + " --truth " + q(dir / "g.hsil") + " --grid 40 --out " +
                            q(dir / "g.csv"),
                        dir);
  REQUIRE(g.code == 0);
  CHECK(g.out.find("grid_cells 4") != std::string::npos);
  CHECK(lines(dir / "g.csv.grid.csv") == 1 + 4 + 1);

  // Shape mismatch and bad input are usage errors.
  write_labels(LabelMap(10, 21, kHealthy), dir / "wide.hsil");
  CHECK(run_cli("eval --pred " + q(dir / "wide.hsil") + " --truth " + q(kData / "field_truth.hsil") + " --out " +
                    q(dir / "x.csv"),
                dir)
            .code == 2);
  std::ofstream(dir / "junk.hsil") << "not a label file";
  CHECK(run_cli("eval --pred " + q(dir / "junk.hsil") + " --truth " + q(kData / "field_truth.hsil") + " --out " +
                    q(dir / "x.csv"),
                dir)
            .code == 2);
}

TEST_CASE("train, predict, k-fold and exit codes") {
  const fs::path dir = testing::scratch_dir("cli_train");
  REQUIRE(run_cli("synth --spec " + q(kData / "small_scene.cfg") + " --cube " + q(dir / "s.hsic") + " --labels " +
                      q(dir / "s.hsil"),
                  dir)
              .code == 0);
  const std::string data = " --cube " + q(dir / "s.hsic") + " --labels " + q(dir / "s.hsil");

  SUBCASE("zero epochs writes the initialized model") {
    write_train_config(dir / "t0.cfg", 0);
    const Run r = run_cli("train" + data + " --config " + q(dir / "t0.cfg") + " --out " + q(dir / "m0.ckpt") +
                              " --seed 3 --quiet",
                          dir);
    REQUIRE(r.code == 0);
    const CapsNet m = load_checkpoint(dir / "m0.ckpt");
    CHECK(m.config().bands == 16);
    CHECK(m.config().patch == 5);
    CHECK(lines(dir / "m0.ckpt.report.csv") == 1);
  }
  SUBCASE("train then predict") {
    write_train_config(dir / "t.cfg", 2);
    REQUIRE(run_cli("train" + data + " --config " + q(dir / "t.cfg") + " --out " + q(dir / "m.ckpt") +
                        " --report " + q(dir / "r.csv") + " --quiet",
                    dir)
                .code == 0);
    CHECK(lines(dir / "r.csv") == 3);
    const Run p = run_cli("predict --checkpoint " + q(dir / "m.ckpt") + " --cube " + q(dir / "s.hsic") + " --out " +
                              q(dir / "p.hsil") + " --raster " + q(dir / "p.ppm") + " --norms " + q(dir / "n.csv") +
                              " --mask " + q(dir / "s.hsil"),
                          dir);
    REQUIRE(p.code == 0);
    const LabelMap pred = read_labels(dir / "p.hsil");
    CHECK(pred.height() == 24);
    CHECK(pred.width() == 24);
    CHECK(read_map(dir / "p.ppm") == pred);
    CHECK(lines(dir / "n.csv") == read_labels(dir / "s.hsil").labeled_count() + 1);
    REQUIRE(run_cli("predict --checkpoint " + q(dir / "m.ckpt") + " --cube " + q(dir / "s.hsic") + " --out " +
                        q(dir / "p2.hsil") + " --threads 2",
                    dir)
                .code == 0);
    CHECK(slurp(dir / "p.hsil") == slurp(dir / "p2.hsil"));

    // A cube with a different band count is rejected.
    SyntheticSceneSpec spec;
    spec.height = spec.width = 8;
    spec.bands = 10;
    write_cube(generate_scene(spec, 1).cube, dir / "b10.hsic");
    CHECK(run_cli("predict --checkpoint " + q(dir / "m.ckpt") + " --cube " + q(dir / "b10.hsic") + " --out " +
                      q(dir / "x.hsil"),
                  dir)
              .code == 2);
    CHECK(run_cli("train --cube " + q(dir / "b10.hsic") + " --labels " + q(dir / "s.hsil") + " --config " +
                      q(dir / "t.cfg") + " --out " + q(dir / "x.ckpt"),
                  dir)
              .code == 2);
  }
  SUBCASE("k-fold writes one report per fold and a summary") {
    write_train_config(dir / "k.cfg", 1);
    const Run r = run_cli("train" + data + " --config " + q(dir / "k.cfg") + " --kfold 5 --threads 2 --out " +
                              q(dir / "k.ckpt") + " --report " + q(dir / "k.csv") + " --quiet",
                          dir);
    REQUIRE(r.code == 0);
    for (int f = 1; f <= 5; ++f) CHECK(fs::exists(dir / ("k.fold" + std::to_string(f) + ".csv")));
    CHECK(lines(dir / "k.summary.csv") == 1 + 5 + 2);
    CHECK(fs::exists(dir / "k.ckpt"));
  }
  SUBCASE("divergence exits with 3 and keeps the partial report") {
    write_train_config(dir / "d.cfg", 3);
    std::ofstream(dir / "d.cfg", std::ios::app) << "lr_base = 1e300\n";
    const Run r = run_cli("train" + data + " --config " + q(dir / "d.cfg") + " --out " + q(dir / "d.ckpt") +
                              " --report " + q(dir / "d.csv") + " --quiet",
                          dir);
    CHECK(r.code == 3);
    CHECK(fs::exists(dir / "d.csv"));
    CHECK_FALSE(fs::exists(dir / "d.ckpt"));
  }
  SUBCASE("--set overrides and rejects unknown keys") {
    write_train_config(dir / "s.cfg", 0);
    CHECK(run_cli("train" + data + " --config " + q(dir / "s.cfg") + " --set patch=7 --set kernel=7 --out " +
                      q(dir / "s7.ckpt"),
                  dir)
              .code == 0);
    CHECK(load_checkpoint(dir / "s7.ckpt").config().patch == 7);
    CHECK(run_cli("train" + data + " --config " + q(dir / "s.cfg") + " --set pach=7 --out " + q(dir / "x.ckpt"), dir)
              .code == 2);
    CHECK(run_cli("train" + data + " --config " + q(dir / "s.cfg") + " --set patch=6 --out " + q(dir / "x.ckpt"), dir)
              .code == 2);
  }
}
