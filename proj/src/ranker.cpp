#include "archdsl/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "archdsl/checkpoint.hpp"
#include "archdsl/optim.hpp"

namespace archdsl {

namespace {

ArchNode relabel_past(const ArchNode& n) {
  if (n.op == OpKind::Hm1) return ArchNode(OpKind::Hm2);
  if (n.op == OpKind::Cm1) return ArchNode(OpKind::Cm2);
  ArchNode out(n.op);
  for (const auto& c : n.children) out.children.push_back(relabel_past(c));
  return out;
}

ArchNode substitute(const ArchNode& n, const ArchNode& h_copy, const ArchNode* c_copy) {
  if (n.op == OpKind::Hm1) return h_copy;
  if (n.op == OpKind::Cm1) return *c_copy;
  ArchNode out(n.op);
  for (const auto& c : n.children) out.children.push_back(substitute(c, h_copy, c_copy));
  return out;
}

const std::vector<OpKind>& leaf_kinds() {
  static const std::vector<OpKind> kinds{OpKind::X,      OpKind::Xm1, OpKind::Hm1, OpKind::Cm1,
                                         OpKind::PosEnc, OpKind::Hm2, OpKind::Cm2};
  return kinds;
}

int leaf_row(OpKind op) {
  const auto& k = leaf_kinds();
  const auto it = std::find(k.begin(), k.end(), op);
  if (it == k.end()) throw std::invalid_argument("no leaf embedding for '" + std::string(token(op)) + "'");
  return static_cast<int>(it - k.begin());
}

bool uses_nary(OpKind op) { return is_order_sensitive(op); }

std::string prefix(OpKind op) { return "op." + std::string(token(op)) + "."; }

}  // namespace

ArchNode unroll_once(const Architecture& arch) {
  const bool has_c = contains(arch.root, OpKind::Cm1);
  if (has_c && !arch.ct_node) throw std::invalid_argument("unroll_once: c_tm1 used without a c_t tap");
  const ArchNode h_copy = relabel_past(arch.root);
  std::optional<ArchNode> c_copy;
  if (arch.ct_node) {
    const ArchNode* tap = node_at(arch.root, *arch.ct_node);
    if (tap == nullptr) throw std::invalid_argument("unroll_once: c_t index out of range");
    c_copy = relabel_past(*tap);
  }
  return substitute(arch.root, h_copy, c_copy ? &*c_copy : nullptr);
}

void RankerConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("ranker hidden size must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("ranker batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("ranker epochs must be >= 0");
  if (head_dropout < 0.0 || head_dropout >= 1.0) throw std::invalid_argument("head dropout must be in [0, 1)");
  if (failure_ppl_threshold <= 1.0) throw std::invalid_argument("failure threshold must exceed 1");
}

std::vector<RankerExample> examples_from_records(const std::vector<ArchPerfRecord>& records,
                                                 double failure_ppl_threshold) {
  const double cap = std::log(failure_ppl_threshold);
  std::vector<RankerExample> out;
  for (const auto& r : records) {
    Architecture a;
    try {
      a = r.architecture();
      unroll_once(a);
    } catch (const std::exception&) {
      continue;
    }
    double y = cap;
    if (r.status == RecordStatus::ok && r.valid_metric && std::isfinite(*r.valid_metric)) {
      y = std::min(*r.valid_metric, cap);
    }
    out.push_back({std::move(a), y, r.id});
  }
  return out;
}

Ranker::Ranker(RankerConfig cfg) : cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
  const int H = cfg_.hidden;
  std::mt19937_64 init(cfg_.seed ^ 0x7a3b1c5d9e2f4a6bULL);
  auto uniform = [&](std::vector<int> shape, double bound) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::uniform_real_distribution<double> d(-bound, bound);
    for (auto& v : t.data) v = d(init);
    return t;
  };
  params_.add("leaf.embedding", uniform({static_cast<int>(leaf_kinds().size()), H}, 0.5));
  for (OpKind op : all_operators()) {
    const int n = uses_nary(op) ? arity(op) : 1;
    const double bound = 1.0 / std::sqrt(static_cast<double>(n * H));
    params_.add(prefix(op) + "W_iou", uniform({3 * H, n * H}, bound));
    params_.add(prefix(op) + "b_iou", Tensor::zeros({3 * H}));
    params_.add(prefix(op) + "W_f", uniform({n * H, n * H}, bound));
    params_.add(prefix(op) + "b_f", Tensor::filled({n * H}, 1.0));
  }
  params_.add("head.w", uniform({1, H}, 1.0 / std::sqrt(static_cast<double>(H))));
  params_.add("head.b", Tensor::zeros({1}));
}

ArchNode Ranker::prepare(const Architecture& arch) const {
  const Architecture canon = canonicalize(arch);
  return cfg_.unroll ? unroll_once(canon) : canon.root;
}

Ranker::Encoded Ranker::encode(ParamStore& store, const ArchNode& n, const Var& zero) const {
  const int H = cfg_.hidden;
  if (is_source(n.op)) {
    return {embedding(param(store.at("leaf.embedding")), {leaf_row(n.op)}), zero};
  }
  std::vector<Encoded> kids;
  for (const auto& c : n.children) kids.push_back(encode(store, c, zero));
  const std::string p = prefix(n.op);
  Var w_iou = param(store.at(p + "W_iou"));
  Var b_iou = param(store.at(p + "b_iou"));
  Var w_f = param(store.at(p + "W_f"));
  Var b_f = param(store.at(p + "b_f"));
  std::vector<Var> cell_terms;
  Var iou;
  if (uses_nary(n.op)) {
    std::vector<Var> hs;
    for (const auto& k : kids) hs.push_back(k.h);
    Var hcat = concat_cols(hs);
    iou = linear(hcat, w_iou, b_iou);
    Var f_all = sigmoid(linear(hcat, w_f, b_f));
    for (std::size_t k = 0; k < kids.size(); ++k) {
      cell_terms.push_back(mult(slice_cols(f_all, static_cast<int>(k) * H, H), kids[k].c));
    }
  } else {
    std::vector<Var> hs;
    for (const auto& k : kids) hs.push_back(k.h);
    Var h_sum = hs.size() == 1 ? hs[0] : add_n(hs);
    iou = linear(h_sum, w_iou, b_iou);
    for (const auto& k : kids) cell_terms.push_back(mult(sigmoid(linear(k.h, w_f, b_f)), k.c));
  }
  Var i = sigmoid(slice_cols(iou, 0, H));
  Var o = sigmoid(slice_cols(iou, H, H));
  Var u = tanh(slice_cols(iou, 2 * H, H));
  cell_terms.push_back(mult(i, u));
  Var c = add_n(cell_terms);
  return {mult(o, tanh(c)), c};
}

Var Ranker::predict(ParamStore& store, const Architecture& arch, std::mt19937_64* rng) const {
  const ArchNode tree = prepare(arch);
  Var zero = constant(Tensor::matrix(1, cfg_.hidden));
  Encoded root = encode(store, tree, zero);
  std::mt19937_64 unused(0);
  Var h = dropout(root.h, cfg_.head_dropout, rng != nullptr, rng ? *rng : unused);
  return linear(h, param(store.at("head.w")), param(store.at("head.b")));
}

double Ranker::score(const Architecture& arch) const {
  auto& store = const_cast<ParamStore&>(params_);  // forward only; no gradient is written
  return predict(store, arch, nullptr)->val().data[0] * target_scale_ + target_mean_;
}

std::vector<double> Ranker::score_all(const std::vector<Architecture>& archs, bool parallel) const {
  std::vector<double> out(archs.size(), 0.0);
  const long n = static_cast<long>(archs.size());
  std::vector<std::string> errors(archs.size());
#pragma omp parallel for schedule(dynamic, 4) if (parallel)
  for (long i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = score(archs[static_cast<std::size_t>(i)]);
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) throw std::invalid_argument("candidate " + std::to_string(i) + ": " + errors[i]);
  }
  return out;
}

Var Ranker::batch_loss(ParamStore& store, const std::vector<const RankerExample*>& batch,
                       std::mt19937_64* rng) const {
  std::vector<Var> terms;
  for (const RankerExample* ex : batch) {
    Var pred = predict(store, ex->arch, rng);
    const double y = (ex->target - target_mean_) / target_scale_;
    Var diff = sub(pred, constant(Tensor({1, 1}, {y})));
    terms.push_back(mult(diff, diff));
  }
  return scale(add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

FitResult Ranker::fit(const std::vector<ArchPerfRecord>& records) {
  return fit(examples_from_records(records, cfg_.failure_ppl_threshold));
}

FitResult Ranker::fit(const std::vector<RankerExample>& examples) {
  FitResult result;
  if (examples.empty()) throw std::invalid_argument("ranker fit needs at least one example");
  // Group by id so repeated evaluations of one cell become one weighted item.
  std::map<std::string, std::pair<double, int>> sums;
  std::map<std::string, const RankerExample*> first;
  std::vector<std::string> order;
  for (const auto& ex : examples) {
    const std::string key = ex.id.empty() ? arch_id(ex.arch) : ex.id;
    auto [it, fresh] = sums.try_emplace(key, 0.0, 0);
    it->second.first += ex.target;
    it->second.second += 1;
    if (fresh) {
      first[key] = &ex;
      order.push_back(key);
    }
  }
  std::sort(order.begin(), order.end());
  std::vector<RankerExample> items;
  for (const auto& key : order) {
    const auto& [s, n] = sums[key];
    items.push_back({first[key]->arch, s / n, key});
  }
  // Standardize targets.
  double mean = 0.0;
  for (const auto& it : items) mean += it.target;
  mean /= static_cast<double>(items.size());
  double var = 0.0;
  for (const auto& it : items) var += (it.target - mean) * (it.target - mean);
  var /= static_cast<double>(items.size());
  target_mean_ = mean;
  target_scale_ = var > 1e-12 ? std::sqrt(var) : 1.0;
  // Sampling weight 1/rank, rank 1 = lowest target; ties broken by id order.
  std::vector<std::size_t> by_target(items.size());
  std::iota(by_target.begin(), by_target.end(), 0);
  std::stable_sort(by_target.begin(), by_target.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].target < items[b].target; });
  std::vector<double> weight(items.size());
  for (std::size_t r = 0; r < by_target.size(); ++r) weight[by_target[r]] = 1.0 / static_cast<double>(r + 1);
  std::discrete_distribution<std::size_t> pick(weight.begin(), weight.end());

  OptimizerConfig oc;
  oc.kind = OptimizerConfig::Kind::adam;
  oc.learning_rate = cfg_.learning_rate;
  oc.l2 = cfg_.l2;
  Optimizer opt(oc);
  std::mt19937_64 rng(cfg_.seed ^ 0x2545f4914f6cdd1dULL);
  const long total = static_cast<long>(examples.size()) * cfg_.epochs;
  std::vector<const RankerExample*> batch;
  double epoch_sum = 0.0;
  long epoch_batches = 0;
  const long per_epoch = static_cast<long>(examples.size());
  for (long d = 0; d < total; ++d) {
    batch.push_back(&items[pick(rng)]);
    const bool last = d + 1 == total;
    if (static_cast<int>(batch.size()) == cfg_.batch_size || last) {
      Var loss = batch_loss(params_, batch, &rng);
      backward(loss);
      const double lv = loss->val().data[0];
      // Parameters are only touched after the loss and gradients are known to be finite.
      if (!std::isfinite(lv) || !std::isfinite(global_grad_norm(params_))) {
        params_.zero_grad();
        result.aborted = true;
        result.draws = d + 1;
        return result;
      }
      opt.step(params_);
      epoch_sum += lv;
      ++epoch_batches;
      batch.clear();
    }
    if ((d + 1) % per_epoch == 0 || last) {
      if (epoch_batches > 0) result.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_batches));
      epoch_sum = 0.0;
      epoch_batches = 0;
    }
  }
  result.draws = total;
  return result;
}

double Ranker::mse(const std::vector<RankerExample>& examples) const {
  if (examples.empty()) return 0.0;
  std::vector<Architecture> archs;
  for (const auto& e : examples) archs.push_back(e.arch);
  const auto pred = score_all(archs);
  double s = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) s += (pred[i] - examples[i].target) * (pred[i] - examples[i].target);
  return s / static_cast<double>(examples.size());
}

void Ranker::bootstrap_ct_embeddings() {
  Tensor& e = params_.at("leaf.embedding").value;
  const int H = cfg_.hidden;
  for (auto [from, to] : {std::pair{OpKind::Hm1, OpKind::Cm1}, std::pair{OpKind::Hm2, OpKind::Cm2}}) {
    for (int c = 0; c < H; ++c) e(leaf_row(to), c) = e(leaf_row(from), c);
  }
}

void Ranker::save(const std::string& path) const {
  nlohmann::json meta{{"kind", "ranker"},
                      {"hidden", cfg_.hidden},
                      {"unroll", cfg_.unroll},
                      {"head_dropout", cfg_.head_dropout},
                      {"target_mean", target_mean_},
                      {"target_scale", target_scale_}};
  save_checkpoint(path, params_, meta);
}

Ranker Ranker::load(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "ranker") throw std::runtime_error(path + " is not a ranker checkpoint");
  RankerConfig cfg;
  cfg.hidden = ck.meta.at("hidden").get<int>();
  cfg.unroll = ck.meta.at("unroll").get<bool>();
  cfg.head_dropout = ck.meta.at("head_dropout").get<double>();
  Ranker r(cfg);
  for (auto& p : r.params_.all()) p.value = ck.params.at(p.name).value;
  r.target_mean_ = ck.meta.at("target_mean").get<double>();
  r.target_scale_ = ck.meta.at("target_scale").get<double>();
  return r;
}

std::vector<int> Selection::all() const {
  std::vector<int> v = top;
  v.insert(v.end(), sampled.begin(), sampled.end());
  return v;
}

Selection select_from_scores(const std::vector<double>& scores, int k_top, int k_sampled, double temperature,
                             std::mt19937_64& rng) {
  if (k_top < 0 || k_sampled < 0) throw std::invalid_argument("selection sizes must be >= 0");
  if (temperature <= 0.0) throw std::invalid_argument("selection temperature must be positive");
  Selection s;
  s.scores = scores;
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });
  if (static_cast<int>(scores.size()) <= k_top + k_sampled) {
    s.top = order;
    return s;
  }
  s.top.assign(order.begin(), order.begin() + k_top);
  std::vector<int> rest(order.begin() + k_top, order.end());
  for (int k = 0; k < k_sampled; ++k) {
    // Shift by the best remaining score so the weights stay finite at low temperature.
    const double best = scores[static_cast<std::size_t>(rest.front())];
    std::vector<double> w;
    for (int i : rest) w.push_back(std::exp(-(scores[static_cast<std::size_t>(i)] - best) / temperature));
    const auto j = std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng);
    s.sampled.push_back(rest[j]);
    rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return s;
}

Selection select(const Ranker& ranker, const std::vector<Architecture>& candidates, int k_top, int k_sampled,
                 double temperature, std::mt19937_64& rng) {
  return select_from_scores(ranker.score_all(candidates), k_top, k_sampled, temperature, rng);
}

}  // namespace archdsl
