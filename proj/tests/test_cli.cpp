// Drives the real executable; BURSTMAMBA_CLI is its path.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "burstmamba/data.hpp"
#include "burstmamba/model.hpp"
#include "burstmamba/tensor_io.hpp"
#include "doctest.h"

using namespace burstmamba;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "bm_test_cli";

fs::path fresh(const std::string& name) {
  auto d = kRoot / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const auto log = kRoot / "last_output.txt";
  fs::create_directories(kRoot);
  const std::string cmd = std::string(BURSTMAMBA_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<std::string> na, nb;
  for (const auto& e : fs::directory_iterator(a)) na.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) nb.push_back(e.path().filename().string());
  std::sort(na.begin(), na.end());
  std::sort(nb.begin(), nb.end());
  if (na != nb) return false;
  for (const auto& n : na)
    if (slurp(a / n) != slurp(b / n)) return false;
  return true;
}

std::string p(const fs::path& x) { return x.string(); }

}  // namespace

TEST_CASE("version and usage errors") {
  auto v = run("--version");
  CHECK(v.code == 0);
  CHECK(v.out.find(BURSTMAMBA_BUILD_ID) != std::string::npos);
  CHECK(run("").code == 2);
  CHECK(run("gen-data --out x --no-such-flag").code == 2);
  CHECK(run("frobnicate").code == 2);
}

TEST_CASE("gen-data is deterministic and validates extents") {
  const auto d = fresh("gen");
  REQUIRE(run("gen-data --out " + p(d / "a") + " --count 4 --seed 7 --size 8 8").code == 0);
  REQUIRE(run("gen-data --out " + p(d / "b") + " --count 4 --seed 7 --size 8 8").code == 0);
  CHECK(same_tree(d / "a", d / "b"));
  auto odd = run("gen-data --out " + p(d / "c") + " --size 15 15");
  CHECK(odd.code == 2);
  CHECK(odd.out.find("even extents required") != std::string::npos);

  REQUIRE(run("gen-data --out " + p(d / "z") + " --count 3 --size 8 8 --burst 3 --shift-max 0").code == 0);
  const auto ds = Dataset::open(d / "z");
  for (std::int64_t i = 0; i < 3; ++i)
    for (const auto& f : ds.load(i).flows) CHECK(f.is_zero());
}

TEST_CASE("gen-data reports IO failures with exit code 1") {
  const auto d = fresh("gen_io");
  std::ofstream(d / "blocker") << "file";
  CHECK(run("gen-data --out " + p(d / "blocker" / "sub") + " --count 1 --size 8 8").code == 1);
}

TEST_CASE("train smoke run and determinism") {
  const auto d = fresh("train");
  REQUIRE(run("gen-data --out " + p(d / "data") + " --count 2 --seed 3").code == 0);
  const std::string base = "train --data " + p(d / "data") + " --stage1 10 --stage2 10 --val-count 1";
  auto r1 = run(base + " --out " + p(d / "m1.bmck"));
  REQUIRE_MESSAGE(r1.code == 0, r1.out);
  const auto csv = slurp(d / "m1.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 21);  // header + 20 rows
  CHECK(csv.rfind("step,stage,loss,val_psnr_db,val_ssim\n", 0) == 0);
  CHECK(fs::exists(d / "m1.json"));
  REQUIRE(run(base + " --out " + p(d / "m2.bmck")).code == 0);
  CHECK(slurp(d / "m1.bmck") == slurp(d / "m2.bmck"));
  CHECK(slurp(d / "m1.csv") == slurp(d / "m2.csv"));
}

TEST_CASE("train gating, abort and config files") {
  const auto d = fresh("train2");
  REQUIRE(run("gen-data --out " + p(d / "data") + " --count 2 --seed 3").code == 0);

  SUBCASE("no stage 2 leaves the temporal blocks at initialization") {
    REQUIRE(run("train --data " + p(d / "data") + " --stage1 3 --stage2 0 --val-count 0 --out " + p(d / "s1.bmck"))
                .code == 0);
    auto trained = load_checkpoint(d / "s1.bmck");
    auto fresh_model = Model::init(trained.config);
    auto a = trained.temporal_parameters();
    auto b = fresh_model.temporal_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK_MESSAGE(a[i].tensor->vec() == b[i].tensor->vec(), a[i].name);
    CHECK(trained.head_w.vec() != fresh_model.head_w.vec());
  }
  SUBCASE("a diverging run exits 3") {
    auto r = run("train --data " + p(d / "data") + " --stage1 20 --stage2 0 --val-count 0 --lr 1e30 --out " +
                 p(d / "nan.bmck"));
    CHECK(r.code == 3);
  }
  SUBCASE("config file sections and overrides") {
    std::ofstream(d / "cfg.json") << R"({"model": {"channels": 8, "stacks": 1}, "train": {"stage1_steps": 2, "stage2_steps": 1, "batch": 1, "val_count": 0}})";
    REQUIRE(run("train --data " + p(d / "data") + " --config " + p(d / "cfg.json") + " --stage2 2 --out " +
                p(d / "c.bmck")).code == 0);
    CHECK(load_checkpoint(d / "c.bmck").config.channels == 8);
    const auto rows = slurp(d / "c.csv");
    CHECK(std::count(rows.begin(), rows.end(), '\n') == 5);
    std::ofstream(d / "bad.json") << R"({"model": {"chanels": 8}})";
    CHECK(run("train --data " + p(d / "data") + " --config " + p(d / "bad.json") + " --out " + p(d / "x.bmck")).code == 2);
  }
}

TEST_CASE("infer and eval") {
  const auto d = fresh("infer");
  REQUIRE(run("gen-data --out " + p(d / "data") + " --count 3 --size 8 8 --burst 3 --seed 4").code == 0);
  std::ofstream(d / "cfg.json") << R"({"model": {"channels": 8, "stacks": 1, "state_dim": 4, "d_psi": 4}})";
  REQUIRE(run("train --data " + p(d / "data") + " --config " + p(d / "cfg.json") +
              " --stage1 2 --stage2 2 --batch 1 --burst-len 3 --patch1 8 --patch2 8 --val-count 0 --out " +
              p(d / "m.bmck")).code == 0);

  SUBCASE("detached output ignores the non-key frames") {
    // two bursts that share frame 0
    auto s = Dataset::open(d / "data").load(0);
    fs::create_directories(d / "b1");
    fs::create_directories(d / "b2");
    save_tensor(s.lr_burst, d / "b1" / "lr.nt");
    auto other = s.lr_burst.clone();
    auto od = other.mutable_data();
    const auto frame = od.size() / 3;
    for (std::size_t i = frame; i < od.size(); ++i) od[i] = 1.0f - od[i];
    save_tensor(other, d / "b2" / "lr.nt");
    REQUIRE(run("infer --ckpt " + p(d / "m.bmck") + " --burst " + p(d / "b1") + " --detached --out " + p(d / "o1.ppm")).code == 0);
    REQUIRE(run("infer --ckpt " + p(d / "m.bmck") + " --burst " + p(d / "b2") + " --detached --out " + p(d / "o2.ppm")).code == 0);
    CHECK(slurp(d / "o1.ppm") == slurp(d / "o2.ppm"));
    CHECK(slurp(d / "o1.nt") == slurp(d / "o2.nt"));
    const auto out = load_tensor(d / "o1.nt");
    CHECK(out.shape() == Shape{3, 32, 32});
  }
  SUBCASE("lengths change the output and the difference report is written") {
    auto r = run("infer --ckpt " + p(d / "m.bmck") + " --burst " + p(d / "data") + " --length 1 --diff-length 3 --out " +
                 p(d / "l1.ppm"));
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(r.out.find("share of difference energy") != std::string::npos);
    CHECK(fs::exists(d / "l1_diff.pgm"));
  }
  SUBCASE("corrupt checkpoint names the missing tensor") {
    // drop one tensor by re-encoding a manifest without it
    auto bytes = read_file_bytes(d / "m.bmck");
    std::string text(bytes.begin(), bytes.end());
    const auto pos = text.find("\"up.out_b\"");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 10, "\"up.zzz_b\"");
    write_file_bytes(d / "bad.bmck", std::vector<std::uint8_t>(text.begin(), text.end()));
    auto r = run("infer --ckpt " + p(d / "bad.bmck") + " --burst " + p(d / "data") + " --out " + p(d / "x.ppm"));
    CHECK(r.code == 2);
    CHECK(r.out.find("missing tensor: up.out_b") != std::string::npos);
  }
  SUBCASE("config mismatch exits 2") {
    std::ofstream(d / "other.json") << R"({"model": {"channels": 16}})";
    auto r = run("infer --ckpt " + p(d / "m.bmck") + " --config " + p(d / "other.json") + " --burst " + p(d / "data") +
                 " --out " + p(d / "x.ppm"));
    CHECK(r.code == 2);
    CHECK(r.out.find("channels: archive 8") != std::string::npos);
  }
  SUBCASE("eval writes one row per length and agrees with infer") {
    REQUIRE(run("eval --ckpt " + p(d / "m.bmck") + " --data " + p(d / "data") + " --lengths 0,1,3 --out " +
                p(d / "e.csv")).code == 0);
    const auto csv = slurp(d / "e.csv");
    CHECK(csv.rfind("length,mean_psnr_db,mean_ssim\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(run("eval --ckpt " + p(d / "m.bmck") + " --data " + p(d / "data") + " --lengths 4").code == 2);
    REQUIRE(run("eval --ckpt " + p(d / "m.bmck") + " --data " + p(d / "data") + " --lengths 3 --limit 1 --out " +
                p(d / "one.csv")).code == 0);
    auto r = run("infer --ckpt " + p(d / "m.bmck") + " --burst " + p(d / "data") + " --index 0 --out " + p(d / "i.ppm"));
    const auto ps = r.out.find("psnr_db ");
    REQUIRE(ps != std::string::npos);
    const double infer_psnr = std::stod(r.out.substr(ps + 8));
    const auto row = slurp(d / "one.csv");
    const double eval_psnr = std::stod(row.substr(row.find('\n') + 3));
    CHECK(infer_psnr == doctest::Approx(eval_psnr).epsilon(1e-5));
  }
  SUBCASE("empty dataset exits 2") {
    REQUIRE(run("gen-data --out " + p(d / "empty") + " --count 0 --size 8 8").code == 0);
    CHECK(run("eval --ckpt " + p(d / "m.bmck") + " --data " + p(d / "empty")).code == 2);
  }
}

TEST_CASE("bench schema and the noisy flag") {
  const auto d = fresh("bench");
  REQUIRE(run("bench --lengths 64,128 --reps 1 --out " + p(d / "b.csv")).code == 0);
  const auto csv = slurp(d / "b.csv");
  CHECK(csv.rfind("kernel,length,median_us\n", 0) == 0);
  CHECK(csv.find("selective_scan,128,") != std::string::npos);
  CHECK(csv.find("attention,64,") != std::string::npos);
  CHECK(csv.find("# noisy") != std::string::npos);
  REQUIRE(run("bench --lengths 64,128 --reps 3 --out " + p(d / "c.csv")).code == 0);
  CHECK(slurp(d / "c.csv").find("noisy") == std::string::npos);
}

TEST_CASE("selfcheck passes and notices a perturbed discretization") {
  auto ok = run("selfcheck");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("0 failed") != std::string::npos);
  auto again = run("selfcheck");
  CHECK(again.out == ok.out);
  auto bad = run("selfcheck --perturb-zoh 1e-6");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAIL  zoh") != std::string::npos);
}
