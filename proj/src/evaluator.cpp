#include "archdsl/evaluator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "archdsl/compiler.hpp"

namespace archdsl {

std::string TaskSpec::name() const {
  return kind == TaskKind::char_lm ? "char_lm" : "copy_memory";
}

namespace {

std::vector<Window> batchify_stream(const std::vector<int>& stream, int batch, int bptt) {
  // Column-major layout: each batch column is a contiguous slice of the stream.
  std::vector<Window> out;
  const std::size_t per_col = stream.size() / static_cast<std::size_t>(batch);
  if (per_col < 2) return out;
  for (std::size_t start = 0; start + 1 < per_col; start += static_cast<std::size_t>(bptt)) {
    const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(bptt), per_col - 1 - start);
    Window w;
    for (std::size_t t = 0; t < len; ++t) {
      std::vector<int> in(static_cast<std::size_t>(batch));
      std::vector<int> tg(static_cast<std::size_t>(batch));
      for (int b = 0; b < batch; ++b) {
        const std::size_t pos = static_cast<std::size_t>(b) * per_col + start + t;
        in[static_cast<std::size_t>(b)] = stream[pos];
        tg[static_cast<std::size_t>(b)] = stream[pos + 1];
      }
      w.inputs.push_back(std::move(in));
      w.targets.push_back(std::move(tg));
    }
    out.push_back(std::move(w));
  }
  return out;
}

double marginal_entropy(const Split& split, int vocab) {
  std::vector<double> counts(static_cast<std::size_t>(vocab), 0.0);
  double total = 0.0;
  for (const auto& w : split.windows) {
    for (const auto& row : w.targets) {
      for (int id : row) {
        counts[static_cast<std::size_t>(id)] += 1.0;
        total += 1.0;
      }
    }
  }
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) h -= (c / total) * std::log(c / total);
  }
  return h;
}

Task make_char_lm(const TaskSpec& spec) {
  std::string text = spec.corpus_text;
  if (text.empty()) {
    std::ifstream in(spec.corpus_path, std::ios::binary);
    if (!in) throw TaskError("cannot read corpus '" + spec.corpus_path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  if (text.empty()) throw TaskError("corpus is empty");
  std::set<unsigned char> chars(text.begin(), text.end());
  if (static_cast<int>(chars.size()) > spec.vocab_size) {
    throw TaskError("corpus has " + std::to_string(chars.size()) + " distinct symbols, vocab limit is " +
                    std::to_string(spec.vocab_size));
  }
  Task task;
  task.spec = spec;
  task.carry_state = true;
  std::map<unsigned char, int> index;
  for (unsigned char c : chars) {
    index[c] = static_cast<int>(task.symbols.size());
    task.symbols.emplace_back(1, static_cast<char>(c));
  }
  task.vocab = static_cast<int>(task.symbols.size());
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(index[c]);
  const auto n = ids.size();
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.valid_fraction));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.test_fraction));
  if (n_valid + n_test >= n) throw TaskError("validation and test fractions leave no training data");
  const auto n_train = n - n_valid - n_test;
  const std::vector<int> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<int> valid(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                               ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  const std::vector<int> test(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  task.train = {batchify_stream(train, spec.batch_size, spec.seq_len), n_train};
  // Evaluation splits use a single column so short splits still produce windows.
  task.valid = {batchify_stream(valid, 1, spec.seq_len), n_valid};
  task.test = {batchify_stream(test, 1, spec.seq_len), n_test};
  if (task.train.windows.empty()) throw TaskError("training split too short for one window");
  if (task.valid.windows.empty()) throw TaskError("validation split too short for one window");
  task.baseline_loss = marginal_entropy(task.valid, task.vocab);
  return task;
}

// Symbol 0 is the blank; 1..vocab_size are data symbols.
Split copy_split(const TaskSpec& spec, int sequences, std::mt19937_64& rng) {
  Split s;
  std::uniform_int_distribution<int> sym(1, spec.vocab_size);
  for (int start = 0; start < sequences; start += spec.batch_size) {
    const int b = std::min(spec.batch_size, sequences - start);
    std::vector<std::vector<int>> seq(static_cast<std::size_t>(b));
    for (auto& row : seq) {
      row.resize(static_cast<std::size_t>(spec.seq_len));
      for (auto& v : row) v = sym(rng);
    }
    Window w;
    for (int t = 0; t < spec.seq_len; ++t) {
      std::vector<int> in(static_cast<std::size_t>(b));
      std::vector<int> tg(static_cast<std::size_t>(b));
      for (int r = 0; r < b; ++r) {
        in[static_cast<std::size_t>(r)] = seq[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)];
        tg[static_cast<std::size_t>(r)] =
            t >= spec.delay ? seq[static_cast<std::size_t>(r)][static_cast<std::size_t>(t - spec.delay)] : 0;
      }
      w.inputs.push_back(std::move(in));
      w.targets.push_back(std::move(tg));
    }
    s.windows.push_back(std::move(w));
    s.tokens += static_cast<std::size_t>(b) * static_cast<std::size_t>(spec.seq_len);
  }
  return s;
}

Task make_copy_memory(const TaskSpec& spec) {
  if (spec.vocab_size < 1) throw TaskError("copy_memory needs at least one data symbol");
  if (spec.seq_len <= spec.delay || spec.delay < 0) throw TaskError("copy_memory needs 0 <= delay < seq_len");
  if (spec.train_sequences < 1 || spec.valid_sequences < 1) throw TaskError("copy_memory needs train and valid data");
  Task task;
  task.spec = spec;
  task.carry_state = false;
  task.vocab = spec.vocab_size + 1;
  task.symbols.emplace_back("_");
  for (int i = 1; i <= spec.vocab_size; ++i) task.symbols.push_back(std::to_string(i));
  std::mt19937_64 rng(spec.seed);
  task.train = copy_split(spec, spec.train_sequences, rng);
  task.valid = copy_split(spec, spec.valid_sequences, rng);
  task.test = copy_split(spec, std::max(spec.test_sequences, 0), rng);
  task.baseline_loss = marginal_entropy(task.valid, task.vocab);
  return task;
}

}  // namespace

Task make_task(const TaskSpec& spec) {
  if (spec.batch_size < 1 || spec.seq_len < 1) throw TaskError("batch size and sequence length must be positive");
  return spec.kind == TaskKind::char_lm ? make_char_lm(spec) : make_copy_memory(spec);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (failure_check_epoch < 1) throw std::invalid_argument("failure_check_epoch must be >= 1");
  if (hidden < 1 || layers < 1) throw std::invalid_argument("hidden and layers must be positive");
  if (lr_decay_factor <= 0.0) throw std::invalid_argument("lr_decay_factor must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  optimizer.validate();
}

std::string to_string(RecordSource s) {
  switch (s) {
    case RecordSource::random: return "random";
    case RecordSource::rl: return "rl";
    case RecordSource::seed: return "seed";
    case RecordSource::human: return "human";
  }
  return "random";
}

std::string to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::ok: return "ok";
    case RecordStatus::diverged: return "diverged";
    case RecordStatus::failed_threshold: return "failed_threshold";
    case RecordStatus::invalid: return "invalid";
    case RecordStatus::timeout: return "timeout";
  }
  return "ok";
}

RecordSource record_source_from(const std::string& s) {
  for (auto v : {RecordSource::random, RecordSource::rl, RecordSource::seed, RecordSource::human}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown record source '" + s + "'");
}

RecordStatus record_status_from(const std::string& s) {
  for (auto v : {RecordStatus::ok, RecordStatus::diverged, RecordStatus::failed_threshold, RecordStatus::invalid,
                 RecordStatus::timeout}) {
    if (to_string(v) == s) return v;
  }
  throw std::invalid_argument("unknown record status '" + s + "'");
}

Architecture ArchPerfRecord::architecture() const {
  Architecture a = parse(dsl);
  a.ct_node = ct_node;
  return a;
}

void to_json(nlohmann::json& j, const ArchPerfRecord& r) {
  auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"id", r.id},
                     {"dsl", r.dsl},
                     {"ct_node", opt(r.ct_node)},
                     {"source", to_string(r.source)},
                     {"task", r.task},
                     {"status", to_string(r.status)},
                     {"valid_metric", opt(r.valid_metric)},
                     {"test_metric", opt(r.test_metric)},
                     {"epochs_run", r.epochs_run},
                     {"wall_seconds", r.wall_seconds},
                     {"batch_index", r.batch_index},
                     {"timestamp", r.timestamp}};
  if (!r.detail.empty()) j["detail"] = r.detail;
}

void from_json(const nlohmann::json& j, ArchPerfRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.dsl = j.at("dsl").get<std::string>();
  r.ct_node = j.at("ct_node").is_null() ? std::nullopt : std::optional<int>(j.at("ct_node").get<int>());
  r.source = record_source_from(j.at("source").get<std::string>());
  r.task = j.at("task").get<std::string>();
  r.status = record_status_from(j.at("status").get<std::string>());
  auto real = [&](const char* key) {
    return j.at(key).is_null() ? std::nullopt : std::optional<double>(j.at(key).get<double>());
  };
  r.valid_metric = real("valid_metric");
  r.test_metric = real("test_metric");
  r.epochs_run = j.at("epochs_run").get<int>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.batch_index = j.at("batch_index").get<int>();
  r.timestamp = j.at("timestamp").get<std::string>();
  r.detail = j.value("detail", "");
}

std::uint64_t evaluation_seed(std::uint64_t base, const std::string& arch_id) {
  std::uint64_t z = base ^ std::stoull(arch_id.substr(0, 16), nullptr, 16);
  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

struct Model {
  std::vector<CellProgram> cells;
  std::vector<int> bases;
  ParamStore store;
  int embedding = -1;
  int decoder_w = -1;
  int decoder_b = -1;
};

Model build_model(const Architecture& arch, int vocab, const TrainConfig& cfg, std::uint64_t seed) {
  Model m;
  std::mt19937_64 rng(seed);
  Tensor emb = Tensor::matrix(vocab, cfg.hidden);
  std::uniform_real_distribution<double> init(-0.04, 0.04);
  for (auto& v : emb.data) v = init(rng);
  m.embedding = m.store.add("embedding", std::move(emb));
  for (int l = 0; l < cfg.layers; ++l) {
    CompileOptions opts;
    opts.init_seed = rng();
    opts.gate3_inner_sigmoid = cfg.gate3_inner_sigmoid;
    m.cells.push_back(compile(arch, cfg.hidden, cfg.hidden, opts));
    m.bases.push_back(static_cast<int>(m.store.size()));
    for (const auto& p : m.cells.back().params.all()) m.store.add("L" + std::to_string(l) + "." + p.name, p.value);
  }
  if (!cfg.tie_embeddings) {
    Tensor w = Tensor::matrix(vocab, cfg.hidden);
    for (auto& v : w.data) v = init(rng);
    m.decoder_w = m.store.add("decoder.W", std::move(w));
  }
  m.decoder_b = m.store.add("decoder.b", Tensor::zeros({vocab}));
  return m;
}

struct LayerState {
  Tensor h;
  std::optional<Tensor> c;
  Tensor x_prev;
};

std::vector<LayerState> zero_state(const Model& m, int batch, int hidden) {
  std::vector<LayerState> s(m.cells.size());
  for (std::size_t l = 0; l < s.size(); ++l) {
    s[l].h = Tensor::matrix(batch, hidden);
    if (m.cells[l].uses_cm1) s[l].c = Tensor::matrix(batch, hidden);
    s[l].x_prev = Tensor::matrix(batch, hidden);
  }
  return s;
}

struct WindowResult {
  Var loss;
  std::vector<Var> h_leaves;
  std::vector<LayerState> next;
};

// Unrolls the model over one window. Dropout is active only when `rng` is given.
WindowResult run_window(Model& m, const Window& w, const std::vector<LayerState>& init, int t0, double dropout_p,
                        std::mt19937_64* rng) {
  WindowResult r;
  const std::size_t L = m.cells.size();
  std::vector<Var> h(L), c(L), xp(L);
  for (std::size_t l = 0; l < L; ++l) {
    h[l] = leaf(init[l].h, rng != nullptr);
    r.h_leaves.push_back(h[l]);
    c[l] = init[l].c ? constant(*init[l].c) : nullptr;
    xp[l] = constant(init[l].x_prev);
  }
  const bool train = rng != nullptr;
  std::mt19937_64 unused(0);
  std::mt19937_64& drng = rng ? *rng : unused;
  Var dec_w = param(m.store[m.decoder_w >= 0 ? m.decoder_w : m.embedding]);
  Var dec_b = param(m.store[m.decoder_b]);
  Var emb = param(m.store[m.embedding]);
  std::vector<Var> losses;
  for (std::size_t t = 0; t < w.inputs.size(); ++t) {
    Var in = dropout(embedding(emb, w.inputs[t]), dropout_p, train, drng);
    for (std::size_t l = 0; l < L; ++l) {
      StepVars out = forward_step(m.cells[l], m.store, m.bases[l], in, h[l], c[l], xp[l], t0 + static_cast<int>(t));
      xp[l] = in;
      h[l] = out.h;
      c[l] = out.c;
      in = dropout(out.h, dropout_p, train, drng);
    }
    losses.push_back(cross_entropy(linear(in, dec_w, dec_b), w.targets[t]));
  }
  r.loss = scale(add_n(losses), 1.0 / static_cast<double>(losses.size()));
  r.next.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    r.next[l].h = h[l]->val();
    if (c[l]) r.next[l].c = c[l]->val();
    r.next[l].x_prev = xp[l]->val();
  }
  return r;
}

double evaluate_split(Model& m, const Task& task, const Split& split, int hidden) {
  double total = 0.0;
  double count = 0.0;
  std::vector<LayerState> state;
  int t0 = 0;
  for (const auto& w : split.windows) {
    const int batch = static_cast<int>(w.inputs[0].size());
    if (!task.carry_state || state.empty()) {
      state = zero_state(m, batch, hidden);
      t0 = 0;
    }
    auto r = run_window(m, w, state, t0, 0.0, nullptr);
    const double tokens = static_cast<double>(w.inputs.size()) * batch;
    total += r.loss->val().data[0] * tokens;
    count += tokens;
    if (task.carry_state) {
      state = std::move(r.next);
      t0 += static_cast<int>(w.inputs.size());
    }
  }
  return total / count;
}

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

ArchPerfRecord train_and_score(const Architecture& arch, const Task& task, const TrainConfig& cfg,
                               const EvalOptions& options) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  ArchPerfRecord rec;
  rec.source = options.source;
  rec.task = task.spec.name();
  rec.batch_index = options.batch_index;
  auto finish = [&](RecordStatus status, std::string detail) {
    rec.status = status;
    rec.detail = std::move(detail);
    rec.wall_seconds = options.deterministic_timing ? 0.0 : elapsed();
    rec.timestamp = options.deterministic_timing ? "1970-01-01T00:00:00Z" : now_iso8601();
    return rec;
  };

  std::vector<int> index_map;
  Architecture canon;
  try {
    canon = canonicalize(arch, &index_map);
  } catch (const std::exception& e) {
    rec.dsl = render(arch.root);
    rec.ct_node = arch.ct_node;
    return finish(RecordStatus::invalid, e.what());
  }
  rec.id = arch_id(canon);
  rec.dsl = render(canon.root);
  rec.ct_node = canon.ct_node;

  const std::uint64_t seed = evaluation_seed(options.seed, rec.id);
  Model model;
  try {
    model = build_model(canon, task.vocab, cfg, seed);
  } catch (const CompileError& e) {
    return finish(RecordStatus::invalid, e.what());
  }
  if (cfg.epochs == 0 || cfg.wall_clock_budget <= 0.0) return finish(RecordStatus::timeout, "no training budget");

  Optimizer opt(cfg.optimizer);
  std::mt19937_64 drop_rng(seed ^ 0x5bd1e995ULL);
  std::optional<double> best;
  const std::size_t n_windows = cfg.max_train_windows > 0
                                    ? std::min<std::size_t>(task.train.windows.size(),
                                                            static_cast<std::size_t>(cfg.max_train_windows))
                                    : task.train.windows.size();
  try {
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::vector<LayerState> state;
      int t0 = 0;
      for (std::size_t wi = 0; wi < n_windows; ++wi) {
        if (elapsed() > cfg.wall_clock_budget) {
          rec.valid_metric = best;
          return finish(RecordStatus::timeout, "wall-clock budget exhausted in epoch " + std::to_string(epoch));
        }
        const Window& w = task.train.windows[wi];
        const int batch = static_cast<int>(w.inputs[0].size());
        if (!task.carry_state || state.empty() || state[0].h.rows() != batch) {
          state = zero_state(model, batch, cfg.hidden);
          t0 = 0;
        }
        auto r = run_window(model, w, state, t0, cfg.dropout, &drop_rng);
        if (!std::isfinite(r.loss->val().data[0])) {
          rec.valid_metric = best;
          return finish(RecordStatus::diverged, "non-finite training loss");
        }
        backward(r.loss);
        for (const auto& hl : r.h_leaves) {
          const auto& g = hl->grad;
          if (!g.empty() && (!g.all_finite() || g.max_abs() > cfg.explode_guard)) {
            rec.valid_metric = best;
            return finish(RecordStatus::diverged, "exploding gradient through the recurrent state");
          }
        }
        const auto step = opt.step(model.store);
        if (!step.finite) {
          rec.valid_metric = best;
          return finish(RecordStatus::diverged, "non-finite parameter " + step.offending);
        }
        if (task.carry_state) {
          state = std::move(r.next);
          t0 += static_cast<int>(w.inputs.size());
        }
      }
      const double v = evaluate_split(model, task, task.valid, cfg.hidden);
      rec.epochs_run = epoch;
      if (!std::isfinite(v)) {
        rec.valid_metric = best;
        return finish(RecordStatus::diverged, "non-finite validation loss");
      }
      if (!best || v < *best) {
        best = v;
      } else if (cfg.decay_on_no_improve) {
        opt.set_learning_rate(opt.learning_rate() / cfg.lr_decay_factor);
      }
      if (epoch == cfg.failure_check_epoch && std::exp(v) > cfg.failure_ppl_threshold) {
        rec.valid_metric = best;
        return finish(RecordStatus::failed_threshold, "validation perplexity above threshold");
      }
    }
    rec.valid_metric = best;
    if (!task.test.windows.empty()) {
      const double t = evaluate_split(model, task, task.test, cfg.hidden);
      if (std::isfinite(t)) rec.test_metric = t;
    }
  } catch (const Divergence& e) {
    rec.valid_metric = best;
    return finish(RecordStatus::diverged, e.what());
  }
  return finish(RecordStatus::ok, "");
}

}  // namespace archdsl
