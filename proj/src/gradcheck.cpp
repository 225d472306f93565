#include "segcam/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>

#include "segcam/explainer.hpp"
#include "segcam/rng.hpp"
#include "segcam/unet.hpp"

namespace segcam {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

FiniteDiffReport finite_diff_check(const ScalarFunction& f, const TensorD& analytic, const TensorD& point,
                                   const FiniteDiffOptions& options) {
  if (analytic.shape() != point.shape()) {
    throw ShapeError("finite_diff_check: gradient " + analytic.shape().to_string() + " vs point " +
                     point.shape().to_string());
  }
  auto eval = [&f](const TensorD& x) {
    const Evaluation e = f(x);
    if (!std::isfinite(e.value)) throw std::runtime_error("finite_diff_check: function returned a non-finite value");
    return e;
  };

  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(point.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  }
  const std::uint64_t base_pattern = options.skip_pattern_changes ? eval(point).pattern : 0;

  FiniteDiffReport report;
  TensorD x = point;
  for (std::size_t i : coords) {
    if (i >= point.size()) throw std::out_of_range("finite_diff_check: coordinate out of range");
    const double x0 = point[i];
    x[i] = x0 + options.h;
    const Evaluation plus = eval(x);
    x[i] = x0 - options.h;
    const Evaluation minus = eval(x);
    bool moved = plus.pattern != base_pattern || minus.pattern != base_pattern;
    double numeric = (plus.value - minus.value) / (2.0 * options.h);
    if (options.fourth_order) {
      x[i] = x0 + 2.0 * options.h;
      const Evaluation plus2 = eval(x);
      x[i] = x0 - 2.0 * options.h;
      const Evaluation minus2 = eval(x);
      moved = moved || plus2.pattern != base_pattern || minus2.pattern != base_pattern;
      numeric = (-plus2.value + 8.0 * plus.value - 8.0 * minus.value + minus2.value) / (12.0 * options.h);
    }
    x[i] = x0;
    if (options.skip_pattern_changes && moved) {
      ++report.skipped;
      continue;
    }
    const double err = relative_error(analytic[i], numeric);
    if (report.checked == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_coordinate = i;
    }
    ++report.checked;
  }
  return report;
}

double finite_diff_check(const std::function<double(const TensorD&)>& f, const TensorD& analytic,
                         const TensorD& point, double h) {
  FiniteDiffOptions opts;
  opts.h = h;
  opts.skip_pattern_changes = false;
  return finite_diff_check([&f](const TensorD& x) { return Evaluation{f(x), 0}; }, analytic, point, opts)
      .max_relative_error;
}

namespace {

TensorD random_tensor(SplitMix64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  TensorD t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU kinks sit far outside the stencil.
TensorD random_away_from_zero(SplitMix64& rng, Shape shape) {
  TensorD t(shape);
  for (auto& v : t.data()) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

class Suite {
 public:
  explicit Suite(const GradcheckOptions& o) : opts_(o) {}

  void record(const std::string& name, const FiniteDiffReport& r) {
    auto& row = rows_[name];
    row.name = name;
    row.max_relative_error = std::max(row.max_relative_error, r.max_relative_error);
    row.checked += r.checked;
    row.skipped += r.skipped;
    if (order_.end() == std::find(order_.begin(), order_.end(), name)) order_.push_back(name);
  }

  FiniteDiffOptions fd_options(std::vector<std::size_t> coords = {}) const {
    FiniteDiffOptions fo;
    fo.h = opts_.h;
    fo.coordinates = std::move(coords);
    return fo;
  }

  using Builder = std::function<NodeId(Graph<double>&, std::span<const NodeId>)>;

  // Checks d(sum_i r_i * out_i)/d leaf for every leaf, all coordinates.
  void check_op(const std::string& name, const Builder& build, const std::vector<TensorD>& leaves, SplitMix64& rng) {
    Graph<double> g;
    g.inject_fault(opts_.fault);
    std::vector<NodeId> ids;
    for (const auto& l : leaves) ids.push_back(g.leaf(l));
    const NodeId out = build(g, ids);
    const TensorD projection = random_tensor(rng, g.value(out).shape());
    const auto grads = g.backward(out, projection);

    for (std::size_t j = 0; j < leaves.size(); ++j) {
      auto f = [&](const TensorD& x) {
        Graph<double> h;
        std::vector<NodeId> hid;
        for (std::size_t k = 0; k < leaves.size(); ++k) hid.push_back(h.leaf(k == j ? x : leaves[k]));
        const NodeId o = build(h, hid);
        const auto& v = h.value(o);
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) s += projection[i] * v[i];
        return Evaluation{s, h.activation_pattern()};
      };
      record(name, finite_diff_check(f, grads.at(ids[j]), leaves[j], fd_options()));
    }
  }

  // Input perturbations move many ReLUs at once, so that check draws more.
  std::vector<std::size_t> sample_coords(SplitMix64& rng, std::size_t size, int factor = 1) const {
    std::vector<std::size_t> c;
    for (int i = 0; i < factor * opts_.samples_per_tensor; ++i) c.push_back(static_cast<std::size_t>(rng.below(size)));
    return c;
  }

  void run_seed(std::uint64_t seed) {
    SplitMix64 rng(seed, 77);
    check_ops(rng);
    check_unet(seed, rng);
  }

  void check_ops(SplitMix64& rng) {
    check_op(
        "conv2d", [](Graph<double>& g, std::span<const NodeId> in) { return g.conv2d(in[0], in[1], in[2], 1, 1); },
        {random_tensor(rng, Shape{1, 2, 5, 5}), random_tensor(rng, Shape{3, 2, 3, 3}), random_tensor(rng, Shape{3})},
        rng);
    check_op(
        "conv2d_stride2",
        [](Graph<double>& g, std::span<const NodeId> in) { return g.conv2d(in[0], in[1], in[2], 2, 1); },
        {random_tensor(rng, Shape{2, 2, 5, 5}), random_tensor(rng, Shape{2, 2, 3, 3}), random_tensor(rng, Shape{2})},
        rng);
    check_op(
        "relu", [](Graph<double>& g, std::span<const NodeId> in) { return g.relu(in[0]); },
        {random_away_from_zero(rng, Shape{1, 2, 4, 4})}, rng);
    check_op(
        "maxpool2", [](Graph<double>& g, std::span<const NodeId> in) { return g.maxpool2(in[0]); },
        {random_tensor(rng, Shape{1, 3, 4, 6})}, rng);
    check_op(
        "upsample2", [](Graph<double>& g, std::span<const NodeId> in) { return g.upsample2(in[0]); },
        {random_tensor(rng, Shape{1, 2, 3, 2})}, rng);
    check_op(
        "concat_channels", [](Graph<double>& g, std::span<const NodeId> in) { return g.concat_channels(in[0], in[1]); },
        {random_tensor(rng, Shape{1, 2, 3, 3}), random_tensor(rng, Shape{1, 1, 3, 3})}, rng);
    check_op(
        "add_fanout",
        [](Graph<double>& g, std::span<const NodeId> in) { return g.add(g.relu(in[0]), g.add(in[0], in[1])); },
        {random_away_from_zero(rng, Shape{1, 1, 3, 3}), random_tensor(rng, Shape{1, 1, 3, 3})}, rng);

    const int classes = 3;
    std::vector<std::int64_t> positions;
    for (int i = 0; i < 5; ++i) positions.push_back(static_cast<std::int64_t>(rng.below(16)));
    const int cls = static_cast<int>(rng.below(classes));
    check_op(
        "select_sum",
        [&](Graph<double>& g, std::span<const NodeId> in) { return g.select_sum(in[0], cls, positions, 1.5); },
        {random_tensor(rng, Shape{1, classes, 4, 4})}, rng);

    std::vector<int> labels(2 * 3 * 3);
    for (auto& l : labels) l = static_cast<int>(rng.below(classes));
    check_op(
        "cross_entropy", [&](Graph<double>& g, std::span<const NodeId> in) { return g.cross_entropy(in[0], labels); },
        {random_tensor(rng, Shape{2, classes, 3, 3}, -3.0, 3.0)}, rng);
  }

  void check_unet(std::uint64_t seed, SplitMix64& rng) {
    UNetConfig cfg;
    cfg.depth = opts_.depth;
    cfg.base_channels = opts_.base_channels;
    cfg.num_classes = opts_.num_classes;
    const UNet model(cfg, seed);
    const auto params = model.parameters64();
    const int n = opts_.image_size;
    const TensorD image = random_tensor(rng, Shape{1, cfg.in_channels, n, n}, 0.0, 1.0);

    // Objective: sum of class-c logits over a random rectangle.
    const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    const int r0 = static_cast<int>(rng.below(n)), c0 = static_cast<int>(rng.below(n));
    const int r1 = std::min(n - 1, r0 + static_cast<int>(rng.below(4)));
    const int c1 = std::min(n - 1, c0 + static_cast<int>(rng.below(4)));
    std::vector<PixelIndex> pixels;
    for (int i = r0; i <= r1; ++i)
      for (int j = c0; j <= c1; ++j) pixels.push_back({i, j});

    auto objective = [&](const TensorD& img, std::span<const TensorD> ps, const TapPerturbations<double>* pert) {
      auto pass = model.forward<double>(img, ps, pert);
      pass.graph.inject_fault(opts_.fault);
      const NodeId obj = objective_sum<double>(pass.graph, pass.logits, pixels, cls, 1.0);
      return std::pair{std::move(pass), obj};
    };

    auto [pass, obj] = objective(image, params, nullptr);
    const auto grads = pass.graph.backward(obj, TensorD(Shape{1}, 1.0));

    for (std::size_t i = 0; i < params.size(); ++i) {
      auto f = [&](const TensorD& x) {
        auto ps = params;
        ps[i] = x;
        auto [p, o] = objective(image, ps, nullptr);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      record("unet.params(sum_M y^c)",
             finite_diff_check(f, grads.at(pass.params[i]), params[i], fd_options(sample_coords(rng, params[i].size()))));
    }

    for (const auto& tap : model.tap_names()) {
      const NodeId node = pass.graph.tap_node(tap);
      const TensorD& activation = pass.graph.value(node);
      auto f = [&](const TensorD& x) {
        TapPerturbations<double> pert;
        TensorD delta(activation.shape());
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = x[k] - activation[k];
        pert.emplace(tap, std::move(delta));
        auto [p, o] = objective(image, params, &pert);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      record("unet.taps(sum_M y^c)",
             finite_diff_check(f, grads.at(node), activation, fd_options(sample_coords(rng, activation.size()))));
    }

    {
      auto f = [&](const TensorD& x) {
        auto [p, o] = objective(x, params, nullptr);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      record("unet.input(sum_M y^c)",
             finite_diff_check(f, grads.at(pass.input), image, fd_options(sample_coords(rng, image.size(), 4))));
    }

    std::vector<int> labels(static_cast<std::size_t>(n) * n);
    for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    auto loss_of = [&](std::span<const TensorD> ps) {
      auto p = model.forward<double>(image, ps);
      p.graph.inject_fault(opts_.fault);
      const NodeId loss = p.graph.cross_entropy(p.logits, labels);
      return std::pair{std::move(p), loss};
    };
    auto [lpass, loss] = loss_of(params);
    const auto lgrads = lpass.graph.backward(loss, TensorD(Shape{1}, 1.0));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto f = [&](const TensorD& x) {
        auto ps = params;
        ps[i] = x;
        auto [p, o] = loss_of(ps);
        return Evaluation{p.graph.value(o)[0], p.graph.activation_pattern()};
      };
      FiniteDiffOptions fo = fd_options(sample_coords(rng, params[i].size()));
      fo.fourth_order = true;
      record("unet.params(loss)", finite_diff_check(f, lgrads.at(lpass.params[i]), params[i], fo));
    }
  }

  GradcheckReport finish(double seconds) const {
    GradcheckReport report;
    report.seconds = seconds;
    report.passed = true;
    for (const auto& name : order_) {
      const auto& row = rows_.at(name);
      report.rows.push_back(row);
      report.max_relative_error = std::max(report.max_relative_error, row.max_relative_error);
      if (row.checked == 0 || !(row.max_relative_error < opts_.tolerance)) report.passed = false;
    }
    return report;
  }

 private:
  GradcheckOptions opts_;
  std::map<std::string, GradcheckRow> rows_;
  std::vector<std::string> order_;
};

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  if (options.seeds < 1) throw std::invalid_argument("gradcheck needs at least one seed");
  const auto start = std::chrono::steady_clock::now();
  Suite suite(options);
  for (int s = 0; s < options.seeds; ++s) suite.run_seed(options.seed + static_cast<std::uint64_t>(s));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return suite.finish(seconds);
}

}  // namespace segcam
