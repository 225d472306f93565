#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segcam/checkpoint.hpp"
#include "segcam/explainer.hpp"
#include "segcam/gradcheck.hpp"
#include "segcam/netpbm.hpp"
#include "segcam/render.hpp"
#include "segcam/service.hpp"
#include "segcam/synth.hpp"
#include "segcam/trainer.hpp"

namespace fs = std::filesystem;
using namespace segcam;
using nlohmann::json;

namespace {

// Thrown for problems detected after argument parsing that are still the
// caller's fault (exit 1, nothing written).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_ints(const std::string& text, std::size_t count, const char* flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": expected " + std::to_string(count) + " comma-separated integers");
    }
  }
  if (out.size() != count) {
    throw UsageError(std::string(flag) + ": expected " + std::to_string(count) + " comma-separated integers");
  }
  return out;
}

struct PixelFlags {
  std::string point;
  std::string rect;
  bool all = false;
  int predicted = -1;

  void add_to(CLI::App* cmd) {
    auto* group = cmd->add_option_group("pixel set", "exactly one of these selects the pixel set M");
    group->add_option("--point", point, "single pixel I,J");
    group->add_option("--rect", rect, "inclusive rectangle I0,J0,I1,J1");
    group->add_flag("--all", all, "every pixel");
    group->add_option("--predicted", predicted, "pixels predicted as class C");
    group->require_option(1);
  }

  PixelSet resolve() const {
    if (!point.empty()) {
      const auto v = parse_ints(point, 2, "--point");
      return pixels::Single{v[0], v[1]};
    }
    if (!rect.empty()) {
      const auto v = parse_ints(rect, 4, "--rect");
      return pixels::Rect{v[0], v[1], v[2], v[3]};
    }
    if (all) return pixels::All{};
    return pixels::PredictedClass{predicted};
  }
};

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

void require_tap(const Network& model, const std::string& tap) {
  if (!model.has_tap(tap)) throw UnknownTapError(tap, model.tap_names());
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

int cmd_gen_data(std::uint64_t seed, int count, int size, const fs::path& out) {
  DatasetSpec spec{seed, count, size};
  spec.validate();
  const auto samples = generate(spec);
  std::cout << write_dataset(out, spec, samples).string() << "\n";
  return 0;
}

struct TrainArgs {
  fs::path data, out, log;
  int epochs = 20;
  std::uint64_t seed = 0;
  int base_channels = 8;
  int depth = 2;
  double lr = 1e-3;
  int batch_size = 4;
};

int cmd_train(const TrainArgs& a) {
  if (!fs::exists(a.data / "manifest.json")) {
    throw std::runtime_error("no manifest.json in " + a.data.string());
  }
  const Dataset data = load_dataset(a.data);
  UNetConfig cfg;
  cfg.num_classes = static_cast<int>(data.class_names.size());
  cfg.base_channels = a.base_channels;
  cfg.depth = a.depth;
  cfg.validate();
  UNet model(cfg, a.seed);
  for (const auto& s : data.samples) model.check_input(s.image.shape());

  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.seed = a.seed;
  tc.validate();

  const fs::path log_path = a.log.empty() ? fs::path(a.out.string() + ".metrics.jsonl") : a.log;
  ensure_parent(a.out);
  ensure_parent(log_path);
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());

  const auto history = train(model, data.samples, tc, [&](const EpochMetrics& m) {
    log << json{{"epoch", m.epoch}, {"loss", m.loss}, {"pixel_accuracy", m.pixel_accuracy}, {"mean_iou", m.mean_iou}}
               .dump()
        << "\n";
    log.flush();
    std::fprintf(stderr, "epoch %d loss %.4f acc %.4f miou %.4f\n", m.epoch, m.loss, m.pixel_accuracy, m.mean_iou);
  });
  const SegMetrics final_metrics = evaluate(model, data.samples);

  Checkpoint ckpt{model, data.class_names, json::object()};
  ckpt.training = {{"epochs", tc.epochs},
                   {"seed", tc.seed},
                   {"learning_rate", tc.learning_rate},
                   {"batch_size", tc.batch_size},
                   {"optimizer", "adam"},
                   {"dataset_seed", data.seed},
                   {"dataset_count", data.samples.size()},
                   {"final_loss", history.back().loss},
                   {"pixel_accuracy", final_metrics.pixel_accuracy},
                   {"mean_iou", final_metrics.mean_iou}};
  save_checkpoint(ckpt, a.out);
  std::printf("pixel_accuracy %.4f\nmean_iou %.4f\n", final_metrics.pixel_accuracy, final_metrics.mean_iou);
  return 0;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& data_dir, const fs::path& pred_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset data = load_dataset(data_dir);
  MetricsAccumulator acc(ckpt.model.num_classes());
  if (!pred_dir.empty()) fs::create_directories(pred_dir);
  for (const auto& s : data.samples) {
    const TensorF pred = predict_mask(ckpt.model.forward(s.image).logits_value());
    acc.add(pred, s.mask);
    if (!pred_dir.empty()) write_file(pred_dir / (s.id + ".pgm"), write_pgm(pred));
  }
  const SegMetrics m = acc.result();
  json ious = json::array();
  for (const auto& v : m.class_iou) ious.push_back(v ? json(*v) : json(nullptr));
  std::cout << json{{"pixel_accuracy", m.pixel_accuracy}, {"mean_iou", m.mean_iou}, {"class_iou", ious}}.dump()
            << "\n";
  return 0;
}

struct ExplainArgs {
  fs::path ckpt, image, out, raw, saliency;
  int class_id = 0;
  std::string layer;
  PixelFlags pixels;
};

int cmd_explain(const ExplainArgs& a) {
  const PixelSet ps = a.pixels.resolve();
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  require_tap(ckpt.model, a.layer);
  const TensorF image = read_ppm(read_file(a.image));

  ExplainRequest req;
  req.class_id = a.class_id;
  req.tap = a.layer;
  req.pixel_set = ps;
  const Heatmap hm = seg_grad_cam(ckpt.model, image, req);
  std::optional<TensorF> sal;
  if (!a.saliency.empty()) sal = saliency_map(ckpt.model, image, req);

  TensorF overlay = colorize_overlay(image, hm.upsampled);
  if (const auto* p = std::get_if<pixels::Single>(&ps)) draw_dot(overlay, p->row, p->col);
  ensure_parent(a.out);
  write_file(a.out, write_ppm(overlay));
  if (!a.raw.empty()) {
    ensure_parent(a.raw);
    const std::string csv = map_to_csv(hm.raw);
    write_file(a.raw, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  }
  if (sal) {
    ensure_parent(a.saliency);
    write_file(a.saliency, write_ppm(colorize_overlay(image, *sal)));
  }
  std::printf("tap %s %dx%d max_raw %.9g\n", hm.tap.c_str(), hm.raw.dim(0), hm.raw.dim(1),
              static_cast<double>(hm.raw.max_value()));
  return 0;
}

struct SweepArgs {
  fs::path ckpt, image, out;
  int class_id = 0;
  PixelFlags pixels;
};

int cmd_sweep(const SweepArgs& a) {
  const PixelSet ps = a.pixels.resolve();
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const TensorF image = read_ppm(read_file(a.image));
  const auto rows = layer_sweep(ckpt.model, image, a.class_id, ps);
  fs::create_directories(a.out);
  std::ostringstream report;
  report << "tap,tap_height,tap_width,max_raw,logit_similarity,edge_similarity\n";
  char buf[160];
  for (const auto& r : rows) {
    TensorF overlay = colorize_overlay(image, r.heatmap.upsampled);
    if (const auto* p = std::get_if<pixels::Single>(&ps)) draw_dot(overlay, p->row, p->col);
    write_file(a.out / (r.tap + ".ppm"), write_ppm(overlay));
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.9g,%.9g,%.9g\n", r.tap.c_str(), r.heatmap.raw.dim(0),
                  r.heatmap.raw.dim(1), static_cast<double>(r.heatmap.raw.max_value()), r.logit_similarity,
                  r.edge_similarity);
    report << buf;
  }
  const std::string text = report.str();
  write_file(a.out / "report.csv", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::cout << text;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int seeds, bool corrupt) {
  GradcheckOptions opt;
  opt.seed = seed;
  opt.seeds = seeds;
  if (corrupt) opt.fault = Fault::ConvKernelGradSkew;
  const GradcheckReport rep = run_gradcheck(opt);
  std::printf("%-40s %14s %8s %8s\n", "check", "max_rel_err", "checked", "skipped");
  for (const auto& r : rep.rows) {
    std::printf("%-40s %14.3e %8zu %8zu\n", r.name.c_str(), r.max_relative_error, r.checked, r.skipped);
  }
  std::printf("max relative error %.3e (tolerance %.0e), %.1f s: %s\n", rep.max_relative_error, opt.tolerance,
              rep.seconds, rep.passed ? "PASS" : "FAIL");
  return rep.passed ? 0 : 2;
}

int cmd_serve(const fs::path& ckpt_path, const fs::path& data_dir, int port, const std::string& host,
              const fs::path& static_dir) {
  Service service(load_checkpoint(ckpt_path), load_dataset(data_dir));
  HttpServer server(service, static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
  if (!server.bind(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  std::printf("listening on http://%s:%d\n", host.c_str(), server.port());
  std::fflush(stdout);
  return server.listen() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Seg-Grad-CAM workbench"};
  app.require_subcommand(1);
  std::function<int()> action;

  // gen-data
  std::uint64_t gen_seed = 0;
  int gen_count = 0, gen_size = 64;
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  gen->add_option("--seed", gen_seed)->required();
  gen->add_option("--count", gen_count)->required()->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_size)->required()->check(CLI::Range(8, 1024));
  gen->add_option("--out", gen_out)->required();
  gen->callback([&] { action = [&] { return cmd_gen_data(gen_seed, gen_count, gen_size, gen_out); }; });

  // train
  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a U-Net on a dataset");
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--out", ta.out)->required();
  tr->add_option("--epochs", ta.epochs)->required()->check(CLI::PositiveNumber);
  tr->add_option("--seed", ta.seed)->required();
  tr->add_option("--base-channels", ta.base_channels)->check(CLI::Range(1, 256));
  tr->add_option("--depth", ta.depth)->check(CLI::Range(1, 8));
  tr->add_option("--lr", ta.lr)->check(CLI::PositiveNumber);
  tr->add_option("--batch-size", ta.batch_size)->check(CLI::PositiveNumber);
  tr->add_option("--log", ta.log, "metrics JSON-lines log (default CKPT.metrics.jsonl)");
  tr->callback([&] { action = [&] { return cmd_train(ta); }; });

  // eval
  fs::path ev_ckpt, ev_data, ev_pred;
  auto* ev = app.add_subcommand("eval", "pixel accuracy and IoU of a checkpoint on a dataset");
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--pred-dir", ev_pred, "write predicted masks as PGM");
  ev->callback([&] { action = [&] { return cmd_eval(ev_ckpt, ev_data, ev_pred); }; });

  // explain
  ExplainArgs ea;
  auto* ex = app.add_subcommand("explain", "Seg-Grad-CAM heatmap for one tap");
  ex->add_option("--ckpt", ea.ckpt)->required();
  ex->add_option("--image", ea.image)->required();
  ex->add_option("--class", ea.class_id)->required()->check(CLI::NonNegativeNumber);
  ex->add_option("--layer", ea.layer)->required();
  ex->add_option("--out", ea.out)->required();
  ex->add_option("--raw", ea.raw, "raw heatmap CSV");
  ex->add_option("--saliency", ea.saliency, "saliency overlay PPM");
  ea.pixels.add_to(ex);
  ex->callback([&] { action = [&] { return cmd_explain(ea); }; });

  // sweep
  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "heatmaps for every tap plus similarity report");
  sw->add_option("--ckpt", sa.ckpt)->required();
  sw->add_option("--image", sa.image)->required();
  sw->add_option("--class", sa.class_id)->required()->check(CLI::NonNegativeNumber);
  sw->add_option("--out", sa.out)->required();
  sa.pixels.add_to(sw);
  sw->callback([&] { action = [&] { return cmd_sweep(sa); }; });

  // gradcheck
  std::uint64_t gc_seed = 0;
  int gc_seeds = 20;
  bool gc_corrupt = false;
  auto* gc = app.add_subcommand("gradcheck", "64-bit finite-difference check of every gradient");
  gc->add_option("--seed", gc_seed)->required();
  gc->add_option("--seeds", gc_seeds)->check(CLI::PositiveNumber);
  gc->add_flag("--corrupt-backward", gc_corrupt)->group("");  // negative control hook
  gc->callback([&] { action = [&] { return cmd_gradcheck(gc_seed, gc_seeds, gc_corrupt); }; });

  // serve
  fs::path sv_ckpt, sv_data, sv_static;
  int sv_port = 8080;
  std::string sv_host = "127.0.0.1";
  auto* sv = app.add_subcommand("serve", "HTTP service over a checkpoint and dataset");
  sv->add_option("--ckpt", sv_ckpt)->required();
  sv->add_option("--data", sv_data)->required();
  sv->add_option("--port", sv_port)->required()->check(CLI::Range(0, 65535));
  sv->add_option("--host", sv_host);
  sv->add_option("--static", sv_static, "directory served at /");
  sv->callback([&] { action = [&] { return cmd_serve(sv_ckpt, sv_data, sv_port, sv_host, sv_static); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    return action();
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const UnknownTapError& e) {
    std::fprintf(stderr, "error: unknown tap '%s'; valid taps: %s\n", e.tap().c_str(), join(e.valid_taps()).c_str());
    return 2;
  } catch (const ExplainError& e) {
    if (e.code() == ExplainError::Code::EmptyPixelSet) {
      std::fprintf(stderr, "error: empty pixel set (%s)\n", e.what());
    } else {
      std::fprintf(stderr, "error: %s\n", e.what());
    }
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
