#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "archdsl/checkpoint.hpp"
#include "archdsl/compiler.hpp"
#include "archdsl/dsl.hpp"
#include "archdsl/evaluator.hpp"
#include "archdsl/orchestrator.hpp"
#include "archdsl/ranker.hpp"
#include "archdsl/rl_generator.hpp"

namespace archdsl {

namespace {

using nlohmann::json;

// Domain failure with a stable code, reported as exit 1.
struct CliError : std::runtime_error {
  CliError(std::string c, const std::string& msg) : std::runtime_error(msg), code(std::move(c)) {}
  std::string code;
};

struct Options {
  std::string dsl;
  bool canonical = false;
  bool json_out = false;
  std::string cells_action;
  std::string cell_name;
  int hidden = 8;
  int input = 4;
  bool check_grad = false;
  bool no_fuse = false;
  std::string task;
  std::string config;
  std::string out;
  std::string mode;
  std::string records;
  std::string model;
  std::string report;
  int workers = 0;
  std::optional<std::uint64_t> seed;
  int seq_len = 50;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ARCHDSL_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw CliError("E_CONFIG", std::string("ARCHDSL_SEED is not an integer: ") + s);
  return v;
}

std::optional<std::uint64_t> effective_seed(const Options& o) { return o.seed ? o.seed : env_seed(); }

RunConfig load_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (auto s = effective_seed(o)) cfg.search.seed = *s;
  if (o.workers > 0) cfg.search.parallel_workers = o.workers;
  return cfg;
}

json analysis_json(const Architecture& arch) {
  const auto a = analyze(arch);
  json sources = json::array();
  for (OpKind s : a.sources_used) sources.push_back(std::string(token(s)));
  json flags = json::array();
  for (Violation v : a.validity_flags) flags.push_back(std::string(violation_name(v)));
  return json{{"dsl", render(arch)},
              {"canonical", render(canonicalize(arch))},
              {"id", arch_id(arch)},
              {"node_count", a.node_count},
              {"height", a.height},
              {"sources", sources},
              {"uses_ct", a.uses_ct},
              {"ct_node", arch.ct_node ? json(*arch.ct_node) : json(nullptr)},
              {"violations", flags}};
}

int cmd_parse(const Options& o, std::ostream& out) {
  const Architecture arch = parse(o.dsl);
  if (o.json_out) {
    out << analysis_json(arch).dump() << "\n";
  } else {
    out << render(o.canonical ? canonicalize(arch) : arch) << "\n";
  }
  return 0;
}

int cmd_cells(const Options& o, std::ostream& out) {
  if (o.cells_action == "list") {
    if (o.json_out) {
      json j = json::object();
      for (const auto& n : builtin_names()) j[n] = render(builtin(n));
      out << j.dump() << "\n";
    } else {
      for (const auto& n : builtin_names()) out << n << "\n";
    }
    return 0;
  }
  if (o.cell_name.empty()) throw CLI::ValidationError("cells show", "a cell name is required");
  const Architecture arch = canonicalize(builtin(o.cell_name));
  if (o.json_out) {
    json j = analysis_json(arch);
    j["name"] = o.cell_name;
    out << j.dump() << "\n";
  } else {
    out << render(arch) << "\n";
  }
  return 0;
}

int cmd_compile(const Options& o, std::ostream& out) {
  const Architecture arch = parse(o.dsl);
  CompileOptions co;
  co.fuse = !o.no_fuse;
  co.init_seed = effective_seed(o).value_or(0);
  const CellProgram prog = compile(arch, o.input, o.hidden, co);
  json j{{"dsl", render(arch)},
         {"instructions", prog.instructions.size()},
         {"linear", prog.count(InstrKind::linear)},
         {"fused_linear", prog.count(InstrKind::fused_linear)},
         {"parameters", prog.params.size()},
         {"uses_cm1", prog.uses_cm1}};
  if (o.check_grad) {
    const auto r = check_cell_gradients(prog, 3, 2, co.init_seed);
    j["max_rel_error"] = r.max_rel_error;
    j["worst_param"] = r.worst_param;
    j["grad_ok"] = r.finite && r.max_rel_error < 1e-4;
    if (!r.finite) throw CliError("E_GRAD", "non-finite gradient: " + r.failure);
  }
  if (o.json_out) {
    out << j.dump() << "\n";
  } else {
    out << "instructions " << j["instructions"] << " (linear " << j["linear"] << ", fused " << j["fused_linear"]
        << "), parameters " << j["parameters"] << "\n";
    if (o.check_grad) {
      out << "max relative gradient error " << std::setprecision(3) << j["max_rel_error"].get<double>() << "\n";
    }
  }
  if (o.check_grad && !j["grad_ok"].get<bool>()) throw CliError("E_GRAD", "gradient check failed");
  return 0;
}

TaskKind task_kind(const std::string& s) {
  if (s == "char_lm") return TaskKind::char_lm;
  if (s == "copy_memory") return TaskKind::copy_memory;
  throw CLI::ValidationError("--task", "must be char_lm or copy_memory");
}

json record_json(const ArchPerfRecord& r) {
  json j;
  to_json(j, r);
  return j;
}

int cmd_eval(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  cfg.task.kind = task_kind(o.task);
  const Architecture arch = parse(o.dsl);
  const Task task = make_task(cfg.task);
  RecordStore store(o.out);
  EvalOptions eo;
  eo.source = RecordSource::human;
  eo.seed = cfg.search.seed;
  eo.deterministic_timing = cfg.search.deterministic_timing;
  const ArchPerfRecord rec = train_and_score(arch, task, cfg.train, eo);
  const bool added = store.append(rec);
  if (o.json_out) {
    json j = record_json(rec);
    j["appended"] = added;
    out << j.dump() << "\n";
  } else {
    out << rec.id << " " << to_string(rec.status);
    if (rec.valid_metric) out << " valid " << *rec.valid_metric;
    out << (added ? "" : " (already in store)") << "\n";
  }
  return 0;
}

int cmd_search(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  cfg.search.mode = o.mode == "rl" ? SearchMode::rl : SearchMode::random_rank;
  const Task task = make_task(cfg.task);
  RecordStore store(o.out);
  SearchResult res;
  if (cfg.search.mode == SearchMode::rl) {
    PolicyConfig pc = cfg.policy;
    pc.seed = cfg.search.seed;
    Policy policy(pc);
    res = run_rl_search(cfg, task, store, policy);
  } else {
    RankerConfig rc = cfg.ranker;
    rc.seed = cfg.search.seed;
    Ranker ranker(rc);
    res = run_random_search(cfg, task, store, ranker);
  }
  json j{{"mode", o.mode}, {"evaluations", res.evaluations}, {"records", store.size()}, {"notes", res.notes}};
  if (res.best) j["best"] = record_json(*res.best);
  if (res.baseline) j["baseline"] = record_json(*res.baseline);
  if (cfg.search.mode == SearchMode::rl) {
    j["batches"] = res.batches;
    j["relaxed_batches"] = res.relaxed_batches;
    j["episode_rewards"] = res.episode_rewards;
    if (res.pretrain) {
      j["pretrain"] = {{"baseline_rate", res.pretrain->baseline_rate},
                       {"final_rate", res.pretrain->final_rate},
                       {"episodes", res.pretrain->episodes}};
    }
  }
  if (o.json_out) {
    out << j.dump() << "\n";
  } else {
    out << "evaluations " << res.evaluations << ", store " << store.size() << " records\n";
    if (res.baseline && res.baseline->valid_metric) out << "baseline " << *res.baseline->valid_metric << "\n";
    if (res.best) {
      out << "best " << res.best->dsl;
      if (res.best->valid_metric) out << " valid " << *res.best->valid_metric;
      out << "\n";
    }
    for (const auto& n : res.notes) out << "note: " << n << "\n";
  }
  return 0;
}

int cmd_rank(const Options& o, std::ostream& out) {
  RunConfig cfg = load_config(o);
  RecordStore store = RecordStore::load(o.records);
  const std::string model = o.model.empty() ? o.records + ".ranker" : o.model;
  RankerConfig rc = cfg.ranker;
  rc.seed = cfg.search.seed;

  std::optional<Ranker> ranker;
  if (o.mode == "fit") {
    ranker.emplace(rc);
    const auto fit = ranker->fit(store.records());
    ranker->save(model);
    const auto examples = examples_from_records(store.records(), rc.failure_ppl_threshold);
    json j{{"model", model},
           {"examples", examples.size()},
           {"epochs", fit.epoch_loss.size()},
           {"final_loss", fit.epoch_loss.empty() ? json(nullptr) : json(fit.epoch_loss.back())},
           {"aborted", fit.aborted},
           {"mse", examples.empty() ? json(nullptr) : json(ranker->mse(examples))}};
    if (o.json_out) {
      out << j.dump() << "\n";
    } else {
      out << "fitted on " << examples.size() << " examples, saved " << model << "\n";
    }
    return 0;
  }

  std::ifstream probe(model);
  if (probe) {
    ranker.emplace(Ranker::load(model));
  } else {
    ranker.emplace(rc);
    ranker->fit(store.records());
  }
  std::vector<Architecture> archs;
  if (!o.dsl.empty()) {
    archs.push_back(parse(o.dsl));
  } else {
    for (const auto& r : store.records()) archs.push_back(r.architecture());
  }
  const auto scores = ranker->score_all(archs, false);
  json rows = json::array();
  for (std::size_t i = 0; i < archs.size(); ++i) {
    rows.push_back({{"dsl", render(archs[i])}, {"id", arch_id(archs[i])}, {"score", scores[i]}});
  }
  if (o.json_out) {
    out << rows.dump() << "\n";
  } else {
    for (const auto& r : rows) out << r["score"].get<double>() << " " << r["dsl"].get<std::string>() << "\n";
  }
  return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
  RecordStore store = RecordStore::load(o.records);
  std::ofstream csv(o.out);
  if (!csv) throw CliError("E_IO", "cannot write " + o.out);
  if (o.report == "ops-over-time") {
    report_ops_over_time(store.records(), csv);
  } else if (o.report == "search-curve") {
    report_search_curve(store.records(), csv);
  } else {
    Architecture arch;
    if (!o.dsl.empty()) {
      arch = parse(o.dsl);
    } else {
      const ArchPerfRecord* best = nullptr;
      for (const auto& r : store.records()) {
        if (r.status == RecordStatus::ok && r.valid_metric && (!best || *r.valid_metric < *best->valid_metric)) {
          best = &r;
        }
      }
      if (!best) throw CliError("E_STORE", "no ok record to dump in " + o.records);
      arch = best->architecture();
    }
    report_hidden_dump(arch, o.hidden, o.input, o.seq_len, effective_seed(o).value_or(0), csv);
  }
  if (o.json_out) {
    out << json{{"report", o.report}, {"out", o.out}, {"records", store.size()}}.dump() << "\n";
  } else {
    out << "wrote " << o.out << "\n";
  }
  return 0;
}

int report_error(std::ostream& err, const std::string& code, const std::string& msg) {
  err << "error " << code << ": " << msg << "\n";
  return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recurrent cell architecture DSL, evaluation and search", "archdsl"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("--json", o.json_out, "machine-readable output");
  app.add_option("--seed", o.seed, "seed for all randomness (falls back to ARCHDSL_SEED)");
  app.add_option("--workers", o.workers, "evaluator threads")->check(CLI::PositiveNumber);

  auto* parse_cmd = app.add_subcommand("parse", "parse, render and analyze a DSL string");
  parse_cmd->add_option("dsl", o.dsl)->required();
  parse_cmd->add_flag("--canonical", o.canonical);

  auto* cells = app.add_subcommand("cells", "built-in cells");
  cells->add_option("action", o.cells_action)->required()->check(CLI::IsMember({"list", "show"}));
  cells->add_option("name", o.cell_name);

  auto* comp = app.add_subcommand("compile", "compile a cell and optionally check its gradients");
  comp->add_option("dsl", o.dsl)->required();
  comp->add_option("--hidden", o.hidden)->required()->check(CLI::PositiveNumber);
  comp->add_option("--input", o.input)->required()->check(CLI::PositiveNumber);
  comp->add_flag("--check-grad", o.check_grad);
  comp->add_flag("--no-fuse", o.no_fuse);

  auto* ev = app.add_subcommand("eval", "train and score one architecture");
  ev->add_option("dsl", o.dsl)->required();
  ev->add_option("--task", o.task)->required()->check(CLI::IsMember({"char_lm", "copy_memory"}));
  ev->add_option("--config", o.config)->required();
  ev->add_option("--out", o.out)->required();

  auto* se = app.add_subcommand("search", "run a search");
  se->add_option("mode", o.mode)->required()->check(CLI::IsMember({"random", "rl"}));
  se->add_option("--config", o.config)->required();
  se->add_option("--out", o.out)->required();

  auto* rk = app.add_subcommand("rank", "fit or apply the ranking function");
  rk->add_option("mode", o.mode)->required()->check(CLI::IsMember({"fit", "score"}));
  rk->add_option("--records", o.records)->required();
  rk->add_option("--dsl", o.dsl);
  rk->add_option("--config", o.config);
  rk->add_option("--model", o.model, "ranker checkpoint (default: <records>.ranker)");

  auto* rp = app.add_subcommand("report", "write a CSV report");
  rp->add_option("kind", o.report)->required()->check(CLI::IsMember({"ops-over-time", "search-curve", "hidden-dump"}));
  rp->add_option("--records", o.records)->required();
  rp->add_option("--out", o.out)->required();
  rp->add_option("--dsl", o.dsl, "hidden-dump: cell to drive (default: best ok record)");
  rp->add_option("--hidden", o.hidden)->check(CLI::PositiveNumber);
  rp->add_option("--input", o.input)->check(CLI::PositiveNumber);
  rp->add_option("--seq-len", o.seq_len)->check(CLI::PositiveNumber);

  // Global flags are accepted after the subcommand too.
  for (auto* sub : {parse_cmd, cells, comp, ev, se, rk, rp}) sub->fallthrough();

  std::vector<std::string> argv_store{"archdsl"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (parse_cmd->parsed()) return cmd_parse(o, out);
    if (cells->parsed()) return cmd_cells(o, out);
    if (comp->parsed()) return cmd_compile(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    if (se->parsed()) return cmd_search(o, out);
    if (rk->parsed()) return cmd_rank(o, out);
    return cmd_report(o, out);
  } catch (const CLI::ValidationError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const CliError& e) {
    return report_error(err, e.code, e.what());
  } catch (const DslError& e) {
    return report_error(err, "E_DSL", e.what());
  } catch (const CompileError& e) {
    return report_error(err, "E_COMPILE", e.what());
  } catch (const Divergence& e) {
    return report_error(err, "E_DIVERGED", e.what());
  } catch (const TaskError& e) {
    return report_error(err, "E_TASK", e.what());
  } catch (const StoreError& e) {
    return report_error(err, "E_STORE", e.what());
  } catch (const std::invalid_argument& e) {
    return report_error(err, "E_CONFIG", e.what());
  } catch (const nlohmann::json::exception& e) {
    return report_error(err, "E_CONFIG", e.what());
  } catch (const std::exception& e) {
    return report_error(err, "E_RUNTIME", e.what());
  }
}

}  // namespace archdsl
