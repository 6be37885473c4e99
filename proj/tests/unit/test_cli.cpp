#include "doctest_torch.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hsf/checkpoint.hpp"
#include "hsf/config.hpp"
#include "hsf/pipeline.hpp"
#include "hsf/png_io.hpp"

using namespace hsf;
using namespace hsf::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hsf_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  for (std::string cell; std::getline(is, cell, ',');) out.push_back(cell);
  return out;
}

/// Smallest config that still runs every stage.
RunConfig tiny(const fs::path& root) {
  RunConfig c = RunConfig::defaults(Preset::Toy);
  c.data_root = root / "data";
  c.out_dir = root / "out";
  c.height = c.width = 32;
  c.base_ch = 2;
  c.unet_depth = 2;
  c.resnet_blocks = 1;
  c.dy_layers = 1;
  c.frb_reduction = 2;
  c.epochs_cgfe = 2;
  c.epochs_fusion = 2;
  c.batch_size = 2;
  c.n_train = 4;
  c.n_test = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("config keys round-trip through text") {
  auto c = RunConfig::defaults(Preset::Toy);
  CHECK(c.base_ch == 16);
  CHECK(c.unet_depth == 3);
  CHECK(c.frb_reduction == 4);
  CHECK(c.epochs_cgfe == 50);
  c.set("lambda_sere", "12.5");
  c.set("hflip", "true");
  c.set("seed", "99");
  const auto text = c.to_text();
  const auto back = load_config(std::nullopt, parse_config_text(text));
  CHECK(back.to_text() == text);
  CHECK(back.get("lambda_sere") == c.get("lambda_sere"));
  for (const auto& k : RunConfig::keys()) CHECK(back.get(k) == c.get(k));

  const auto paper = RunConfig::defaults(Preset::Paper);
  CHECK(paper.base_ch == 64);
  CHECK(paper.unet_depth == 7);
  CHECK(paper.frb_reduction == 64);
  CHECK(paper.lambda_sere == 80.0);
  CHECK(paper.mu == 100.0);
  CHECK(paper.rho == 50.0);
  CHECK(paper.eta == 40.0);
  CHECK(paper.lr == 2e-4);
  CHECK(paper.beta1 == 0.5);
  CHECK_NOTHROW(paper.validate());
}

TEST_CASE("config rejects unknown keys and bad values") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("lamda_sere", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("epochs_cgfe", "ten"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("no equals sign here"), ConfigError);
  c.height = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  RunConfig d;
  d.frb_reduction = 7;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  const auto o = parse_config_text("# comment\nseed = 3\n\nbase_ch=8 # trailing\n");
  REQUIRE(o.size() == 2);
  CHECK(o[1] == std::pair<std::string, std::string>{"base_ch", "8"});
}

TEST_CASE("config file and overrides stack in order") {
  const auto dir = scratch("config");
  std::ofstream(dir / "run.cfg") << "preset = paper\nseed = 4\nepochs_cgfe = 3\n";
  const auto c = load_config(dir / "run.cfg", {{"seed", "6"}});
  CHECK(c.preset == Preset::Paper);
  CHECK(c.base_ch == 64);
  CHECK(c.seed == 6);
  CHECK(c.epochs_cgfe == 3);
  CHECK(load_config(dir / "run.cfg", {}, Preset::Toy).base_ch == 16);
  CHECK_THROWS_AS(load_config(dir / "missing.cfg", {}), NotFound);
}

TEST_CASE("checkpoints round-trip bitwise and reject other versions") {
  const auto dir = scratch("ckpt");
  Checkpoint c;
  c.meta["kind"] = "test";
  torch::manual_seed(1);
  c.add("a", torch::randn({3, 4}));
  c.add("b", torch::randint(0, 100, {5}, torch::kInt64));
  c.add("c", torch::randn({2, 2}, torch::kFloat64));
  c.save(dir / "x.ckpt");
  const auto back = Checkpoint::load(dir / "x.ckpt");
  CHECK(back.meta == c.meta);
  for (const char* n : {"a", "b", "c"}) CHECK(torch::equal(back.blob(n), c.blob(n)));
  back.save(dir / "y.ckpt");
  CHECK(slurp(dir / "x.ckpt") == slurp(dir / "y.ckpt"));
  CHECK_THROWS_AS(back.blob("d"), FormatError);

  auto bytes = slurp(dir / "x.ckpt");
  bytes[8] = static_cast<char>(Checkpoint::kVersion + 1);
  std::ofstream(dir / "v.ckpt", std::ios::binary) << bytes;
  CHECK_THROWS_AS(Checkpoint::load(dir / "v.ckpt"), FormatError);
  std::ofstream(dir / "t.ckpt", std::ios::binary) << slurp(dir / "x.ckpt").substr(0, 40);
  CHECK_THROWS_AS(Checkpoint::load(dir / "t.ckpt"), FormatError);
  CHECK_THROWS_AS(Checkpoint::load(dir / "none.ckpt"), NotFound);
}

TEST_CASE("thread count comes from the environment") {
  ::setenv("HSF_NUM_THREADS", "1", 1);
  CHECK_NOTHROW(configure_threads());
  CHECK(torch::get_num_threads() == 1);
  ::setenv("HSF_NUM_THREADS", "zero", 1);
  CHECK_THROWS_AS(configure_threads(), ConfigError);
  ::unsetenv("HSF_NUM_THREADS");
}

TEST_CASE("synth writes a deterministic dataset and manifest") {
  const auto root = scratch("synth");
  auto c = tiny(root);
  const auto r = cmd_synth(c);
  CHECK(r.train_ids.size() == 4);
  CHECK(r.test_ids.size() == 2);
  const auto manifest = lines(slurp(c.data_root / "manifest.csv"));
  REQUIRE(manifest.size() == 7);
  CHECK(manifest[0] == "split,id,seed");
  const auto first = slurp(c.data_root / "train" / "Visible" / (r.train_ids[0] + ".png"));
  fs::remove_all(c.data_root);
  cmd_synth(c);
  CHECK(slurp(c.data_root / "train" / "Visible" / (r.train_ids[0] + ".png")) == first);
  const auto split = DatasetSplit::discover(c.data_root, "test", SplitRole::Train);
  CHECK(split.ids == r.test_ids);
}

TEST_CASE("cgfe training needs labels") {
  const auto root = scratch("nolabels");
  auto c = tiny(root);
  cmd_synth(c);
  fs::remove_all(c.data_root / "train" / "Label");
  CHECK_THROWS_AS(cmd_train_cgfe(c, cgfe::Modality::Infrared), ConfigError);
}

TEST_CASE("end-to-end pipeline on a tiny configuration") {
  const auto root = scratch("pipeline");
  auto c = tiny(root);
  cmd_synth(c);
  const auto ir = cmd_train_cgfe(c, cgfe::Modality::Infrared);
  const auto vis = cmd_train_cgfe(c, cgfe::Modality::Visible);
  CHECK(ir == c.out_dir / "cgfe_ir.ckpt");

  const auto cg_csv = lines(slurp(c.out_dir / "cgfe_ir_loss.csv"));
  REQUIRE(cg_csv.size() == 3);
  CHECK(cg_csv[0] == kCgfeCsvHeader);
  CHECK(split_csv(cg_csv[1]).size() == split_csv(kCgfeCsvHeader).size());
  CHECK(split_csv(cg_csv[2])[0] == "2");

  const auto ck = Checkpoint::load(ir);
  CHECK(ck.meta.at("rng").at("seed") == 5);
  CHECK(ck.meta.at("epochs_done") == 2);
  const auto before_ir = fingerprint(load_cgfe(ck));
  const auto before_vis = fingerprint(load_cgfe(Checkpoint::load(vis)));

  SUBCASE("fusion, fuse and evaluate") {
    const auto fu = cmd_train_fusion(c, ir, vis);
    CHECK(fingerprint(load_cgfe(Checkpoint::load(ir))) == before_ir);
    CHECK(fingerprint(load_cgfe(Checkpoint::load(vis))) == before_vis);
    const auto fcsv = lines(slurp(c.out_dir / "fusion_loss.csv"));
    REQUIRE(fcsv.size() == 3);
    CHECK(fcsv[0] == kFusionCsvHeader);
    const auto head = split_csv(fcsv[0]);
    CHECK(std::find(head.begin(), head.end(), "sigma_omega") != head.end());
    CHECK(std::find(head.begin(), head.end(), "sigma_gamma") != head.end());
    const auto row = split_csv(fcsv[2]);
    CHECK(std::stod(row[8]) > 0.0);
    CHECK(std::stod(row[8]) < 1.0);

    const auto out = root / "fused";
    const auto fr = cmd_fuse(c, ir, vis, fu, c.data_root / "test", out, true);
    CHECK(fr.written.size() == 2);
    CHECK(fr.failures.empty());
    CHECK(fs::exists(out / "masks" / (fr.written[0] + ".png")));
    const auto img = read_png(out / (fr.written[0] + ".png"));
    CHECK(img.channels == 3);
    CHECK(img.height == 32);

    const auto ev = cmd_evaluate(c, {out, c.data_root / "test", root / "report" / "metrics.csv", ir, std::nullopt});
    CHECK(ev.rows.size() == 2);
    REQUIRE(ev.iou.has_value());
    const auto report = lines(slurp(root / "report" / "metrics.csv"));
    REQUIRE(report.size() == 4);
    CHECK(report[0] == "id,ssimx,cc,psnr,nabf");
    CHECK(split_csv(report[3])[0] == "mean");
    double mean_ssimx = 0;
    for (const auto& r : ev.rows) mean_ssimx += r.ssimx / 2.0;
    CHECK(std::abs(ev.summary.ssimx - mean_ssimx) < 1e-9);
    const auto miou = lines(slurp(root / "report" / "miou.csv"));
    CHECK(miou[0] == "class,name,iou");
    CHECK(miou.size() == 16);

    SUBCASE("a corrupt pair fails alone") {
      std::ofstream(c.data_root / "test" / "Visible" / (fr.written[1] + ".png"), std::ios::trunc) << "junk";
      const auto out2 = root / "fused2";
      const auto bad = cmd_fuse(c, ir, vis, fu, c.data_root / "test", out2);
      CHECK(bad.written.size() == 1);
      REQUIRE(bad.failures.size() == 1);
      CHECK(bad.failures[0].first == fr.written[1]);
      CHECK(fs::exists(out2 / (fr.written[0] + ".png")));
    }
    SUBCASE("mismatched ids are an alignment error") {
      fs::remove(out / (fr.written[0] + ".png"));
      CHECK_THROWS_AS(cmd_evaluate(c, {out, c.data_root / "test", root / "r2.csv", std::nullopt, std::nullopt}),
                      AlignmentError);
    }
  }
  SUBCASE("fusion rejects swapped or mismatched checkpoints") {
    CHECK_THROWS_AS(cmd_train_fusion(c, vis, ir), ConfigError);
    auto other = c;
    other.base_ch = 4;
    other.out_dir = root / "other";
    const auto ir4 = cmd_train_cgfe(other, cgfe::Modality::Infrared);
    CHECK_THROWS_AS(cmd_train_fusion(c, ir4, vis), ConfigError);
  }
}

TEST_CASE("evaluating the sources against themselves") {
  const auto root = scratch("selfeval");
  auto c = tiny(root);
  c.n_test = 3;
  cmd_synth(c);
  // a fused image equal to both sources: write the infrared plane as the visible image too
  const auto test = c.data_root / "test";
  for (const auto& e : fs::directory_iterator(test / "Infrared")) {
    const auto r = read_png(e.path());
    Raster8 rgb;
    rgb.height = r.height;
    rgb.width = r.width;
    rgb.channels = 3;
    for (auto v : r.pixels)
      for (int k = 0; k < 3; ++k) rgb.pixels.push_back(v);
    write_png(test / "Visible" / e.path().filename(), rgb);
  }
  const auto ev = cmd_evaluate(c, {test / "Infrared", test, root / "m.csv", std::nullopt, std::nullopt});
  REQUIRE(ev.rows.size() == 3);
  for (const auto& r : ev.rows) {
    CHECK(r.ssimx == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.psnr == 100.0);
  }
  CHECK(ev.summary.ssimx == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_FALSE(ev.iou.has_value());
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  const auto root = scratch("resume");
  auto c = tiny(root);
  c.epochs_cgfe = 3;
  cmd_synth(c);
  cmd_train_cgfe(c, cgfe::Modality::Visible);
  const auto full_csv = slurp(c.out_dir / "cgfe_vis_loss.csv");
  const auto full = fingerprint(load_cgfe(Checkpoint::load(c.out_dir / "cgfe_vis.ckpt")));

  auto part = c;
  part.out_dir = root / "part";
  part.epochs_cgfe = 1;
  cmd_train_cgfe(part, cgfe::Modality::Visible);
  part.epochs_cgfe = 3;
  cmd_train_cgfe(part, cgfe::Modality::Visible, true);
  CHECK(slurp(part.out_dir / "cgfe_vis_loss.csv") == full_csv);
  CHECK(fingerprint(load_cgfe(Checkpoint::load(part.out_dir / "cgfe_vis.ckpt"))) == full);
}
