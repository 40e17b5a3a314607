#include "cpnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <random>

#include "cpnet/cp_module.hpp"
#include "cpnet/errors.hpp"
#include "cpnet/model.hpp"

namespace cpnet {

namespace {

using Rng = std::mt19937_64;

Tensor uniform(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// A scalar function of some tensors. `loss` records a fresh forward pass on
// the given tape and reads the checked tensors through tape.parameter().
struct Case {
  std::string name;
  std::deque<Parameter> owned;  // deque moves keep element addresses
  std::vector<Parameter*> checked;
  std::shared_ptr<void> state;  // anything else the loss refers to
  std::function<Var(Tape&)> loss;

  Parameter& leaf(const std::string& n, Tensor v) {
    Parameter& p = owned.emplace_back(n, std::move(v));
    checked.push_back(&p);
    return p;
  }
};

// Reduces an op output to a scalar with fixed random weights, so every output
// element contributes with a distinct sensitivity.
Var project(Var out, const Tensor& weights) { return sum(mul(out, out.tape->constant(weights))); }

struct Evaluation {
  double loss;
  std::uint64_t selections;
};

Evaluation evaluate(Case& c) {
  Tape tape;
  tape.track_selections(true);
  const Var l = c.loss(tape);
  return {static_cast<double>(l.value()[0]), tape.selection_hash()};
}

std::vector<std::size_t> probe_positions(std::size_t numel, std::size_t max_probes, Rng& rng) {
  std::vector<std::size_t> all(numel);
  for (std::size_t i = 0; i < numel; ++i) all[i] = i;
  if (numel <= max_probes) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(max_probes);
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<GradcheckGroup> check_case(Case& c, const GradcheckOptions& opt, Rng& rng) {
  std::vector<GradcheckGroup> out;
  for (Parameter* p : c.checked) p->zero_grad();
  std::uint64_t base_selections = 0;
  {
    Tape tape;
    tape.track_selections(true);
    const Var l = c.loss(tape);
    base_selections = tape.selection_hash();
    tape.backward(l);
  }
  struct Probe {
    std::size_t group;
    double analytic;
    double numeric;
  };
  std::vector<Probe> probes;
  for (Parameter* pp : c.checked) {
    Parameter& p = *pp;
    GradcheckGroup& g = out.emplace_back();
    g.name = c.name + "/" + p.name;
    for (std::size_t i : probe_positions(p.value.numel(), opt.max_probes, rng)) {
      const float original = p.value[i];
      p.value[i] = original + opt.epsilon;
      const Evaluation plus = evaluate(c);
      p.value[i] = original - opt.epsilon;
      const Evaluation minus = evaluate(c);
      p.value[i] = original;
      if (plus.selections != base_selections || minus.selections != base_selections) {
        ++g.unstable;
        continue;
      }
      // The perturbation is applied in float; divide by the step actually taken.
      const double step = static_cast<double>(original + opt.epsilon) - static_cast<double>(original - opt.epsilon);
      probes.push_back({out.size() - 1, p.grad[i], (plus.loss - minus.loss) / step});
    }
  }
  double scale = 0.0;
  for (const Probe& p : probes) scale = std::max(scale, std::fabs(p.analytic));
  for (const Probe& p : probes) {
    GradcheckGroup& g = out[p.group];
    ++g.probed;
    g.max_abs_gradient = std::max(g.max_abs_gradient, std::fabs(p.analytic));
    g.max_abs_error = std::max(g.max_abs_error, std::fabs(p.analytic - p.numeric));
    g.max_rel_error = std::max(g.max_rel_error, gradcheck_relative_error(p.analytic, p.numeric, scale));
  }
  return out;
}

// A random instance can land on a kink where every probe of some tensor flips
// a selection. Such instances are redrawn; the last attempt is reported either way.
constexpr int kCaseDraws = 8;

void check_drawn(Case (*draw)(Rng&), const GradcheckOptions& opt, Rng& rng, std::vector<GradcheckGroup>& out) {
  std::vector<GradcheckGroup> groups;
  for (int attempt = 0; attempt < kCaseDraws; ++attempt) {
    Case c = draw(rng);
    groups = check_case(c, opt, rng);
    if (std::all_of(groups.begin(), groups.end(), [](const GradcheckGroup& g) { return g.probed > 0; })) break;
  }
  out.insert(out.end(), groups.begin(), groups.end());
}

// ------------------------------------------------------------------ cases

std::deque<Case> op_cases(Rng& rng) {
  std::deque<Case> cases;  // growth must not move existing cases
  auto add_case = [&](std::string name) -> Case& {
    cases.emplace_back();
    cases.back().name = std::move(name);
    return cases.back();
  };

  {
    Case& c = add_case("conv2d");
    Parameter& x = c.leaf("input", uniform({2, 2, 4, 4}, rng));
    Parameter& k = c.leaf("kernel", uniform({3, 2, 3, 3}, rng));
    Parameter& b = c.leaf("bias", uniform({3}, rng));
    Tensor r = uniform({2, 3, 4, 4}, rng);
    c.loss = [&x, &k, &b, r](Tape& t) {
      return project(conv2d(t.parameter(x), t.parameter(k), t.parameter(b)), r);
    };
  }
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    Case& c = add_case(mode == Mode::Train ? "batch_norm_train" : "batch_norm_eval");
    Parameter& x = c.leaf("input", uniform({3, 2, 2, 3}, rng));
    auto bn = std::make_shared<BatchNorm>("bn", 2);
    bn->running_mean = uniform({2}, rng, -0.5f, 0.5f);
    bn->running_var = uniform({2}, rng, 0.5f, 1.5f);
    Parameter& gm = c.leaf("gamma", uniform({2}, rng, 0.5f, 1.5f));
    Parameter& bt = c.leaf("beta", uniform({2}, rng));
    Tensor r = uniform({3, 2, 2, 3}, rng);
    c.loss = [&x, &gm, &bt, bn, mode, r](Tape& t) {
      return project(batch_norm(t.parameter(x), *bn, t.parameter(gm), t.parameter(bt), mode, false), r);
    };
  }
  {
    Case& c = add_case("batch_norm_channels_last");
    Parameter& x = c.leaf("input", uniform({4, 3, 2}, rng));
    auto bn = std::make_shared<BatchNorm>("bn", 2);
    Parameter& gm = c.leaf("gamma", uniform({2}, rng, 0.5f, 1.5f));
    Parameter& bt = c.leaf("beta", uniform({2}, rng));
    Tensor r = uniform({4, 3, 2}, rng);
    c.loss = [&x, &gm, &bt, bn, r](Tape& t) {
      return project(
          batch_norm_channels_last(t.parameter(x), *bn, t.parameter(gm), t.parameter(bt), Mode::Train, false), r);
    };
  }
  {
    Case& c = add_case("relu");
    Parameter& x = c.leaf("input", uniform({24}, rng));
    Tensor r = uniform({24}, rng);
    c.loss = [&x, r](Tape& t) { return project(relu(t.parameter(x)), r); };
  }
  {
    Case& c = add_case("global_avg_pool");
    Parameter& x = c.leaf("input", uniform({4, 3, 2, 2}, rng));
    Tensor r = uniform({2, 3}, rng);
    c.loss = [&x, r](Tape& t) { return project(global_avg_pool(t.parameter(x), 2), r); };
  }
  {
    Case& c = add_case("linear");
    Parameter& x = c.leaf("input", uniform({2, 3, 5}, rng));
    Parameter& w = c.leaf("weight", uniform({4, 5}, rng));
    Parameter& b = c.leaf("bias", uniform({4}, rng));
    Tensor r = uniform({2, 3, 4}, rng);
    c.loss = [&x, &w, &b, r](Tape& t) { return project(linear(t.parameter(x), t.parameter(w), t.parameter(b)), r); };
  }
  {
    Case& c = add_case("softmax_cross_entropy");
    Parameter& z = c.leaf("logits", uniform({5, 4}, rng, -2.0f, 2.0f));
    std::vector<int> labels(5);
    std::uniform_int_distribution<int> cls(0, 3);
    for (auto& l : labels) l = cls(rng);
    c.loss = [&z, labels](Tape& t) { return softmax_cross_entropy(t.parameter(z), labels).loss; };
  }
  {
    Case& c = add_case("gather_rows");
    Parameter& s = c.leaf("source", uniform({6, 3}, rng));
    IndexMatrix idx{6, 2, std::vector<std::int32_t>(12)};
    std::uniform_int_distribution<std::int32_t> row(0, 5);
    for (auto& v : idx.values) v = row(rng);
    Tensor r = uniform({6, 2, 3}, rng);
    c.loss = [&s, idx, r](Tape& t) { return project(gather_rows(t.parameter(s), idx), r); };
  }
  {
    Case& c = add_case("max_over_set");
    Parameter& x = c.leaf("input", uniform({3, 4, 5}, rng));
    Tensor r = uniform({3, 5}, rng);
    c.loss = [&x, r](Tape& t) { return project(max_over_set(t.parameter(x)).value, r); };
  }
  {
    Case& c = add_case("add_over_set");
    Parameter& x = c.leaf("pairs", uniform({3, 2, 4}, rng));
    Parameter& a = c.leaf("anchor", uniform({3, 4}, rng));
    Tensor r = uniform({3, 2, 4}, rng);
    c.loss = [&x, &a, r](Tape& t) { return project(add_over_set(t.parameter(x), t.parameter(a)), r); };
  }
  {
    // Layout and element-wise plumbing: slice, both layout transposes,
    // reshape, add and mul in one chain.
    Case& c = add_case("layout");
    Parameter& x = c.leaf("frames", uniform({2, 3, 2, 2}, rng));
    Parameter& y = c.leaf("cols", uniform({8, 5}, rng));
    Tensor r = uniform({2, 2, 2, 2}, rng);
    c.loss = [&x, &y, r](Tape& t) {
      Var pts = frames_to_points(t.parameter(x));                  // [8, 3]
      Var mixed = mul(add(pts, slice_cols(t.parameter(y), 1, 3)), pts);
      Var back = points_to_frames(slice_cols(mixed, 0, 2), 2, 2, 2);  // [2, 2, 2, 2]
      return project(reshape(reshape(back, {4, 4}), {2, 2, 2, 2}), r);
    };
  }
  return cases;
}

// Random non-zero gammas so that every CP parameter influences the output.
void randomize_norms(CPModuleParams& p, Rng& rng) {
  for (auto& n : p.norm) {
    n.gamma.value = uniform(n.gamma.value.shape(), rng, 0.5f, 1.5f);
    n.beta.value = uniform(n.beta.value.shape(), rng, -0.5f, 0.5f);
  }
}

// Width 32 gives the bottleneck 8 channels; with only 2 the next batch norm
// is so curved in each weight that central differences miss by O(eps^2).
Case ce_case(Rng& rng) {
  Case c;
  c.name = "correspondence_embed";
  const FrameDims dims{2, 2, 2};
  const std::size_t C = 32, k = 3;
  Parameter& f = c.leaf("features", uniform({dims.points(), C}, rng));
  const TopKIndex topk = knn_brute(FeaturePointCloud(f.value, dims), k);
  const Tensor disp = pair_displacements(dims, topk);
  auto params = std::make_shared<CPModuleParams>(init_params(C, rng()));
  randomize_norms(*params, rng);
  for (Parameter* p : params->parameters()) c.checked.push_back(p);
  c.state = params;
  Tensor r = uniform({dims.points(), C}, rng);
  c.loss = [&f, p = params.get(), topk, disp, r](Tape& t) {
    return project(correspondence_embed(t.parameter(f), topk, disp, *p, Mode::Train, false).value, r);
  };
  return c;
}

// Full toy CPNet cross-entropy on two random 2x2x2 clips with k = 3. The
// neighbor search reruns on every evaluation and its choices are part of the
// selection hash. Norms feeding a relu get betas in [1, 2] so that most relu
// units sit away from their kink; otherwise nearly every probe of an early
// layer flips some unit and is discarded.
Case toy_case(Rng& rng) {
  Case c;
  c.name = "toy_cpnet";
  auto model = std::make_shared<ToyModel>(ToyModel::cpnet(3, rng()));
  for (BatchNorm* n : model->norms()) {
    n->gamma.value = uniform(n->gamma.value.shape(), rng, 0.5f, 1.0f);
    n->beta.value = uniform(n->beta.value.shape(), rng, 1.0f, 2.0f);
  }
  model->cp()->norm[2].beta.value = uniform({kToyWidth}, rng, -0.5f, 0.5f);
  for (Parameter* p : model->parameters()) c.checked.push_back(p);
  c.state = model;
  const Tensor videos = uniform({2, 2, 2, 2}, rng);
  std::vector<int> labels(2);
  std::uniform_int_distribution<int> cls(0, 3);
  for (auto& l : labels) l = cls(rng);
  c.loss = [m = model.get(), videos, labels](Tape& t) {
    return softmax_cross_entropy(m->forward(t, videos, Mode::Train, false), labels).loss;
  };
  return c;
}

}  // namespace

double gradcheck_relative_error(double analytic, double numeric, double case_scale) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), kGradcheckFloor * case_scale});
  return denom > 0.0 ? std::fabs(analytic - numeric) / denom : 0.0;
}

bool GradcheckReport::group_passed(const GradcheckGroup& g) const {
  return g.probed > 0 && g.max_rel_error < options.tolerance;
}

bool GradcheckReport::passed() const {
  if (groups.empty()) return false;
  return std::all_of(groups.begin(), groups.end(), [&](const GradcheckGroup& g) { return group_passed(g); });
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  require(std::isfinite(options.epsilon) && options.epsilon > 0.0f, "gradcheck: epsilon must be positive and finite");
  require(std::isfinite(options.tolerance) && options.tolerance > 0.0, "gradcheck: tolerance must be positive");
  require(options.max_probes > 0, "gradcheck: max_probes must be positive");
  GradcheckReport report;
  report.options = options;
  Rng rng(options.seed);
  for (Case& c : op_cases(rng)) {
    std::vector<GradcheckGroup> groups = check_case(c, options, rng);
    report.groups.insert(report.groups.end(), groups.begin(), groups.end());
  }
  check_drawn(ce_case, options, rng, report.groups);
  check_drawn(toy_case, options, rng, report.groups);
  return report;
}

void write_gradcheck_report(std::ostream& out, const GradcheckReport& report) {
  out << "group,probed,unstable,max_abs_gradient,max_rel_error,max_abs_error,status\n";
  for (const auto& g : report.groups) {
    out << g.name << ',' << g.probed << ',' << g.unstable << ',' << std::scientific << std::setprecision(3)
        << g.max_abs_gradient << ',' << g.max_rel_error << ',' << g.max_abs_error << std::defaultfloat << ','
        << (report.group_passed(g) ? "pass" : "FAIL") << '\n';
  }
}

}  // namespace cpnet
