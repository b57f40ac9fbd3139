#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "inn/config.hpp"
#include "inn/dataset.hpp"
#include "inn/errors.hpp"
#include "inn/io.hpp"
#include "inn/pipeline.hpp"
#include "test_util.hpp"

using namespace inn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("inn_cli_io_" + name);
  fs::remove_all(p);
  return p;
}

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" INN_CLI_PATH "\" " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
          static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w,
                                     const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> out;
  for (auto v : {0x00000803u, n, h, w}) {
    auto b = be32(v);
    out.insert(out.end(), b.begin(), b.end());
  }
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  for (auto v : {0x00000801u, static_cast<std::uint32_t>(labels.size())}) {
    auto b = be32(v);
    out.insert(out.end(), b.begin(), b.end());
  }
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("IDX reader scaling, errors and byte round trip") {
  Dataset one = parse_idx(idx_images(1, 1, 1, {255}), idx_labels({4}));
  REQUIRE(one.size() == 1);
  CHECK(one.images[0].shape() == Shape{1, 1, 1});
  CHECK(one.images[0].values()[0] == 1.0f);
  CHECK(one.labels[0] == 4);

  CHECK_THROWS_AS(parse_idx(idx_images(2, 1, 1, {1, 2}), idx_labels({0})), LengthMismatchError);
  CHECK_THROWS_AS(parse_idx(idx_images(2, 1, 1, {1}), idx_labels({0, 1})), LengthMismatchError);
  auto bad_magic = idx_images(1, 1, 1, {0});
  bad_magic[3] = 0x01;
  CHECK_THROWS_AS(parse_idx(bad_magic, idx_labels({0})), FormatMagicError);
  auto label_magic = idx_labels({0});
  label_magic[3] = 0x03;
  CHECK_THROWS_AS(parse_idx(idx_images(1, 1, 1, {0}), label_magic), FormatMagicError);

  Rng rng(3);
  std::vector<std::uint8_t> pixels(5 * 6 * 7), labels(5);
  for (auto& p : pixels) p = static_cast<std::uint8_t>(rng.below(256));
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(10));
  const auto img_bytes = idx_images(5, 6, 7, pixels);
  const auto lbl_bytes = idx_labels(labels);
  Dataset d = parse_idx(img_bytes, lbl_bytes);
  CHECK(encode_idx_images(d) == img_bytes);
  CHECK(encode_idx_labels(d) == lbl_bytes);

  Dataset synth = make_synthetic_digits(20, 4, "train");
  Dataset back = parse_idx(encode_idx_images(synth), encode_idx_labels(synth));
  for (std::size_t i = 0; i < synth.size(); ++i) CHECK(testutil::bit_equal(back.images[i].values(), synth.images[i].values()));
  CHECK(back.labels == synth.labels);

  const fs::path dir = scratch("idx");
  io::write_file_atomic(dir / "i", img_bytes);
  io::write_file_atomic(dir / "l", lbl_bytes);
  CHECK(read_idx(dir / "i", dir / "l").labels == d.labels);
  CHECK_THROWS(read_idx(dir / "missing", dir / "l"));
  fs::remove_all(dir);
}

TEST_CASE("CIFAR binary reader") {
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 7;
  rec[1] = 128;
  rec[1 + 1024] = 255;
  Dataset d = parse_cifar_binary(rec);
  REQUIRE(d.size() == 1);
  CHECK(d.labels[0] == 7);
  CHECK(d.images[0].shape() == Shape{3, 32, 32});
  CHECK(d.images[0].values()[0] == doctest::Approx(0.5019608).epsilon(1e-6));
  CHECK(d.images[0].values()[0] == 128.0f / 255.0f);
  CHECK(d.images[0].values()[1024] == 1.0f);

  std::vector<std::uint8_t> two = rec;
  two.insert(two.end(), rec.begin(), rec.begin() + 100);
  try {
    parse_cifar_binary(two);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("3073") != std::string::npos);
  }
  rec[0] = 10;
  CHECK_THROWS_AS(parse_cifar_binary(rec), LabelError);
}

TEST_CASE("presets expand to their interference settings") {
  struct Want {
    const char* name;
    float a, b, g;
    int k;
  };
  for (const Want& w : {Want{"fig3-blue", 0.5f, 0.4f, 0.4f, 8}, Want{"fig3-green", 0.3f, 0.3f, 0.4f, 4},
                        Want{"fig3-red", 0.2f, 0.3f, 0.2f, 4}, Want{"fig3-purple", 0.1f, 0.1f, 0.1f, 8}}) {
    InterferenceConfig c = preset_interference(w.name);
    CHECK(c.alpha == w.a);
    CHECK(c.beta == w.b);
    CHECK(c.gamma == w.g);
    CHECK(c.backgrounds == w.k);
  }
  CHECK(preset_names().size() == 4);
  CHECK_THROWS_AS(preset_interference("fig3-orange"), ConfigError);
}

TEST_CASE("config render and parse round trip") {
  for (const auto& name : preset_names()) {
    ExperimentConfig c;
    apply_preset(c, name);
    c.seed = 12345678901234ULL;
    c.attack.iterations = 500;
    c.epsilons = {0.0f, 0.1f, 16.0f / 255.0f};
    c.finalize();
    CHECK(parse_config(render_config(c)) == c);
  }
  ExperimentConfig odd;
  odd.dataset.format = "idx";
  odd.dataset.path = "/data/mnist";
  odd.pretrain_seed = 99;
  odd.attack.step_size = 0.001f;
  odd.attack.eot_resample = true;
  odd.modes = {CurveMode::undefended};
  odd.finetune.learning_rate = 0.003f;
  odd.finalize();
  CHECK(parse_config(render_config(odd)) == odd);
}

TEST_CASE("config parsing rules") {
  ExperimentConfig c = parse_config("# comment\nalpha = 0.25\npreset = fig3-green\nseed = 7  # trailing\n\n");
  CHECK(c.interference.alpha == 0.25f);
  CHECK(c.interference.beta == 0.3f);
  CHECK(c.interference.backgrounds == 4);
  CHECK(c.seed == 7);
  CHECK(c.interference.master_seed == 7);
  CHECK(c.effective_pretrain_seed() == 7);

  CHECK(parse_config("eps = 0, 2/255, 0.3\n").epsilons == std::vector<float>{0.0f, 2.0f / 255.0f, 0.3f});
  CHECK(parse_config("modes = INN2,undefended\n").modes == std::vector<CurveMode>{CurveMode::inn2, CurveMode::undefended});

  for (const char* bad : {"alpha 0.3\n", "colour = red\n", "seed = 1\nseed = 2\n", "gamma = 1.5\n", "K = 0\n",
                          "seed = -1\n", "alpha = x\n", "finetune.epochs = 0\n"}) {
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
  }
  try {
    parse_config("seed = 1\nbogus = 2\n");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("epsilon parsing and formatting") {
  CHECK(parse_epsilon("8/255") == 8.0f / 255.0f);
  CHECK(parse_epsilon("8") == 8.0f / 255.0f);
  CHECK(parse_epsilon("0") == 0.0f);
  CHECK(parse_epsilon("0.3") == 0.3f);
  CHECK(parse_epsilon("1e-2") == 0.01f);
  CHECK(parse_epsilon(" 16/255 ") == 16.0f / 255.0f);
  for (const char* bad : {"", "abc", "256", "1.5", "-0.1", "3/0", "2/x", "0.1.2"}) {
    CHECK_THROWS_AS(parse_epsilon(bad), ConfigError);
  }
  CHECK(parse_epsilon_list("0,2,4,8,16") ==
        std::vector<float>{0.0f, 2.0f / 255.0f, 4.0f / 255.0f, 8.0f / 255.0f, 16.0f / 255.0f});
  CHECK(format_epsilon(0.3f) == "0.3");
  CHECK(format_epsilon(0.0f) == "0.0");
  for (float e : {0.0f, 0.3f, 2.0f / 255.0f, 16.0f / 255.0f, 1.0f}) CHECK(parse_epsilon(format_epsilon(e)) == e);
}

TEST_CASE("INN_SEED from the environment") {
  ::unsetenv("INN_SEED");
  CHECK_FALSE(seed_from_env().has_value());
  ::setenv("INN_SEED", "42", 1);
  CHECK(seed_from_env() == 42u);
  ::setenv("INN_SEED", "4x2", 1);
  CHECK_THROWS_AS(seed_from_env(), ConfigError);
  ::unsetenv("INN_SEED");
}

TEST_CASE("atomic writes replace whole files and leave no temporaries") {
  const fs::path dir = scratch("atomic");
  const fs::path target = dir / "a" / "b" / "file.bin";
  io::write_file_atomic(target, std::vector<std::uint8_t>(1000, 7));
  CHECK(io::read_file(target) == std::vector<std::uint8_t>(1000, 7));
  io::write_text_atomic(target, "short");
  CHECK(io::read_file(target) == std::vector<std::uint8_t>{'s', 'h', 'o', 'r', 't'});
  std::size_t entries = 0;
  for (const auto& e : fs::directory_iterator(target.parent_path())) {
    (void)e;
    ++entries;
  }
  CHECK(entries == 1);
  CHECK_THROWS(io::read_file(dir / "nope"));
  fs::remove_all(dir);
}

TEST_CASE("output paths") {
  const fs::path out = "run";
  CHECK(pipeline::snapshot_path(out, 3) == fs::path("run/snapshots/epoch3.innc"));
  CHECK(pipeline::curve_path(out) == fs::path("run/curves/robustness.csv"));
  CHECK(pipeline::adversarial_path(out, 0.3f, CurveMode::inn2).parent_path() == fs::path("run/adv"));
  CHECK(pipeline::adversarial_path(out, 0.3f, CurveMode::inn2).filename().string().find("INN2") != std::string::npos);
  CHECK(pipeline::eval_log_path(out, "clean").parent_path() == fs::path("run/logs"));
}

TEST_CASE("command line usage errors exit with 2") {
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("gradcheck --no-such-flag").code == 2);
  CHECK(run_cli("--help").code == 0);
  RunResult bad = run_cli("gen-backgrounds --preset fig3-orange --out /tmp/inn_cli_io_unused");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("error:") != std::string::npos);
  CHECK(count_lines(bad.output) == 1);
}

TEST_CASE("gradcheck reports every op and passes") {
  RunResult r = run_cli("gradcheck --seeds 3");
  CHECK(r.code == 0);
  CHECK(r.output.find("conv2d") != std::string::npos);
  CHECK(r.output.find("small_conv_net") != std::string::npos);
  CHECK(r.output.find("pass") != std::string::npos);
  RunResult strict = run_cli("gradcheck --seeds 1 --threshold 1e-12");
  CHECK(strict.code == 1);
}

TEST_CASE("INN_SEED and --seed select the same backgrounds") {
  const fs::path a = scratch("seed_a"), b = scratch("seed_b"), c = scratch("seed_c");
  const std::string common = "gen-backgrounds --preset fig3-blue --channels 1 --height 12 --width 12 --out ";
  REQUIRE(run_cli(common + a.string(), "INN_SEED=5").code == 0);
  REQUIRE(run_cli(common + b.string() + " --seed 5").code == 0);
  REQUIRE(run_cli(common + c.string() + " --seed 6", "INN_SEED=5").code == 0);
  const auto fa = io::read_file(a / "backgrounds.innc");
  CHECK(fa == io::read_file(b / "backgrounds.innc"));
  CHECK(fa != io::read_file(c / "backgrounds.innc"));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("finetune twice gives identical checkpoints and curve emits five rows per mode") {
  const fs::path base = scratch("pipeline");
  const std::string data = " --train-count 160 --test-count 40 --eval-count 8 --pretrain-epochs 1 --finetune-epochs 3";
  RunResult pre = run_cli("pretrain --preset fig3-blue --out " + (base / "pre").string() + data);
  REQUIRE_MESSAGE(pre.code == 0, pre.output);
  const std::string ckpt = (base / "pre" / "pretrained.innc").string();
  for (const char* run : {"ft1", "ft2"}) {
    RunResult ft = run_cli("finetune --preset fig3-blue --pretrained " + ckpt + " --out " + (base / run).string() + data);
    REQUIRE_MESSAGE(ft.code == 0, ft.output);
  }
  for (std::size_t e = 1; e <= 3; ++e) {
    const auto x = io::read_file(pipeline::snapshot_path(base / "ft1", e));
    CHECK(x == io::read_file(pipeline::snapshot_path(base / "ft2", e)));
  }

  RunResult curve = run_cli("curve --preset fig3-blue --eps 0,2,4,8,16 --iterations 2 --pretrained " + ckpt +
                            " --out " + (base / "curve").string() + data);
  REQUIRE_MESSAGE(curve.code == 0, curve.output);
  const auto csv_bytes = io::read_file(pipeline::curve_path(base / "curve"));
  const std::string csv(csv_bytes.begin(), csv_bytes.end());
  CHECK(count_lines(csv) == 16);
  for (const char* mode : {",INN1,", ",INN2,", ",undefended,"}) {
    std::size_t rows = 0;
    for (std::size_t pos = csv.find(mode); pos != std::string::npos; pos = csv.find(mode, pos + 1)) ++rows;
    CHECK(rows == 5);
  }
  CHECK(fs::exists(base / "curve" / "snapshots" / "epoch3.innc"));
  CHECK(fs::exists(pipeline::adversarial_path(base / "curve", 16.0f / 255.0f, CurveMode::inn1)));

  RunResult eval = run_cli("eval --preset fig3-blue --out " + (base / "curve").string() + " --adv " +
                           pipeline::adversarial_path(base / "curve", 8.0f / 255.0f, CurveMode::inn1).string() + data);
  REQUIRE_MESSAGE(eval.code == 0, eval.output);
  CHECK(eval.output.find("accuracy") != std::string::npos);
  fs::remove_all(base);
}
