#include "prunelab/pipeline.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>

#include "json_fields.hpp"
#include "prunelab/binary_io.hpp"
#include "prunelab/checkpoint.hpp"
#include "prunelab/errors.hpp"

namespace prunelab {

namespace fs = std::filesystem;
using nlohmann::json;

// --- config ----------------------------------------------------------------

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  JsonFields top(j, "config");
  top.get("seed", c.seed);
  if (const auto* m = top.child("model")) {
    if (m->is_object() && m->contains("seed")) throw ConfigError("model.seed is not allowed; set the top-level seed");
    c.model = model_config_from_json(*m);
  }
  c.model.seed = c.seed;
  if (const auto* t = top.child("task")) c.task = task_spec_from_json(*t);
  if (const auto* t = top.child("train")) {
    JsonFields f(*t, "train");
    f.get("steps", c.train.steps);
    f.get("lr", c.train.lr);
    f.get("batch", c.train.batch);
    f.finish();
  }
  c.train.seed = c.seed;
  if (const auto* s = top.child("sweep")) {
    JsonFields f(*s, "sweep");
    f.get("grid", c.grid);
    f.get("layer_block_rho", c.layer_block_rho);
    f.finish();
  }
  if (const auto* d = top.child("diagnostics")) {
    JsonFields f(*d, "diagnostics");
    f.get("n", c.diag_n);
    f.finish();
  }
  if (const auto* a = top.child("allocation")) {
    JsonFields f(*a, "allocation");
    f.get("target", c.alloc_target);
    f.get("epsilon", c.alloc_epsilon);
    f.finish();
  }
  std::string plan;
  if (top.get("plan", plan)) c.plan = plan;
  top.get("output_dir", c.output_dir);
  top.finish();

  if (c.train.steps == 0) throw ConfigError("train.steps must be positive");
  if (c.train.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(c.train.lr >= 0.0) || !std::isfinite(c.train.lr)) throw ConfigError("train.lr must be a finite value >= 0");
  if (c.grid.empty()) throw ConfigError("sweep.grid must not be empty");
  for (double r : c.grid)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweep.grid values must lie in [0, 1]");
  if (!(c.layer_block_rho >= 0.0 && c.layer_block_rho <= 1.0))
    throw ConfigError("sweep.layer_block_rho must lie in [0, 1]");
  if (c.diag_n == 0) throw ConfigError("diagnostics.n must be positive");
  if (!(c.alloc_target >= 0.0 && c.alloc_target <= 1.0)) throw ConfigError("allocation.target must lie in [0, 1]");
  if (std::isnan(c.alloc_epsilon)) throw ConfigError("allocation.epsilon must be a number");
  if (c.task.vocab_size != c.model.vocab_size) throw ConfigError("task.vocab_size must equal model.vocab_size");
  if (c.task.d_in != c.model.d_in) throw ConfigError("task.d_in must equal model.d_in");
  if (c.task.t_max * c.task.frames_per_token > c.model.max_src_len)
    throw ConfigError("task utterances (t_max * frames_per_token) exceed model.max_src_len");
  if (c.task.t_max + 1 > c.model.max_tgt_len) throw ConfigError("task.t_max + 1 exceeds model.max_tgt_len");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const FormatError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json canonical_json(const RunConfig& c) {
  json model = to_json(c.model);
  model.erase("seed");
  json j = {{"seed", c.seed},
            {"model", model},
            {"task", to_json(c.task)},
            {"train", {{"steps", c.train.steps}, {"lr", c.train.lr}, {"batch", c.train.batch}}},
            {"sweep", {{"grid", c.grid}, {"layer_block_rho", c.layer_block_rho}}},
            {"diagnostics", {{"n", c.diag_n}}},
            {"allocation", {{"target", c.alloc_target}, {"epsilon", c.alloc_epsilon}}}};
  if (c.plan) j["plan"] = *c.plan;
  return j;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(canonical_json(cfg).dump()); }

std::string_view to_string(SweepScope s) {
  switch (s) {
    case SweepScope::global: return "global";
    case SweepScope::side: return "side";
    case SweepScope::layer_blocks: return "layer_blocks";
    case SweepScope::components: return "components";
  }
  return "?";
}

SweepScope parse_scope(std::string_view s) {
  for (auto v : {SweepScope::global, SweepScope::side, SweepScope::layer_blocks, SweepScope::components})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown sweep scope '" + std::string(s) + "'");
}

std::string artifact::sweep_csv(SweepScope s) { return "sweep_" + std::string(to_string(s)) + ".csv"; }
std::string artifact::sweep_json(SweepScope s) { return "sweep_" + std::string(to_string(s)) + ".json"; }

// --- workspace --------------------------------------------------------------

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json(const fs::path& p) {
  try {
    return json::parse(binio::read_file(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + " is not valid JSON: " + e.what());
  }
}

constexpr int kSchemaVersion = 1;

}  // namespace

Workspace::Workspace(RunConfig cfg, fs::path out_dir, std::size_t jobs)
    : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), dir_(std::move(out_dir)), jobs_(jobs ? jobs : 1) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir_.string() + ": " + ec.message());
}

void Workspace::record(std::string_view name, std::string_view command, const json& extra) {
  const auto manifest_path = path(artifact::kManifest);
  json m = fs::exists(manifest_path) ? read_json(manifest_path) : json::object();
  m["schema_version"] = kSchemaVersion;
  m["tool"] = "prune-lab 0.1.0";
  json entry = {{"command", command},
                {"config_hash", hash_},
                {"sha256", sha256_hex(binio::read_file(path(name)))},
                {"created_at", utc_now()}};
  entry.update(extra);
  m["artifacts"][std::string(name)] = entry;
  binio::atomic_write(manifest_path, m.dump(1) + "\n");
}

void Workspace::write(std::string_view name, const std::string& bytes, std::string_view command, const json& extra) {
  binio::atomic_write(path(name), bytes);
  record(name, command, extra);
}

Model Workspace::load_model(const std::optional<fs::path>& checkpoint) const {
  const fs::path p = checkpoint ? *checkpoint : path(artifact::kCheckpoint);
  if (!fs::exists(p)) throw ConfigError("checkpoint " + p.string() + " does not exist; run `train` first");
  return load_checkpoint(p, cfg_.model);
}

TaskData Workspace::data() const { return generate(cfg_.task); }

fs::path resolve_out_dir(const RunConfig& cfg, const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("PRUNE_LAB_OUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

// --- formatting -------------------------------------------------------------

std::string format_sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string format_pct2(double fraction) {
  char buf[64];
  const double pct = 100.0 * fraction;
  std::snprintf(buf, sizeof buf, "%.2f", pct);
  if (std::string_view(buf) == "-0.00") return "0.00";
  return buf;
}

namespace {

std::string csv_text(std::string s) {
  for (auto& c : s)
    if (c == ',' || c == '\n' || c == '"') c = ';';
  return s;
}

}  // namespace

std::string sweep_csv(const SweepResult& r) {
  std::string out = "selector_side,selector_kind,layer_range,sparsity_pct,wer_clean,wer_other,delta_other,status\n";
  out += "-,baseline,-,0," + format_pct2(r.baseline_clean.wer) + "," + format_pct2(r.baseline_other.wer) + ",0.00,ok\n";
  for (const auto& c : r.cells) {
    out += c.selector.side_str() + "," + c.selector.kind_str() + "," + c.selector.layer_str() + "," +
           format_sig6(100.0 * c.rho) + ",";
    if (c.ok)
      out += format_pct2(c.clean.wer) + "," + format_pct2(c.other.wer) + "," + format_pct2(c.delta_other / 100.0);
    else
      out += ",,";
    out += "," + csv_text(c.status) + "\n";
  }
  return out;
}

std::string sensitivity_csv(const SensitivityReport& r) {
  std::string out = "module,split,s_g,s_h,n\n";
  for (const auto& e : r.entries)
    out += e.module + "," + std::string(to_string(e.split)) + "," + format_sig6(e.s_g) + "," + format_sig6(e.s_h) +
           "," + std::to_string(e.n) + "\n";
  return out;
}

std::string compression_csv(const std::vector<CompressionRow>& rows) {
  std::string out = "model,wer_pct,cer_pct,total_params,sparsity_pct,flops,sparse_size_bytes\n";
  for (const auto& r : rows)
    out += r.label + "," + format_pct2(r.rates.wer) + "," + format_pct2(r.rates.cer) + "," +
           std::to_string(r.cost.total_params) + "," + format_sig6(100.0 * r.cost.sparsity) + "," +
           format_sig6(r.cost.flops_per_step) + "," + std::to_string(r.cost.sparse_size_bytes) + "\n";
  return out;
}

json to_json(const ErrorRates& r) {
  return {{"wer", r.wer},
          {"cer", r.cer},
          {"substitutions", r.substitutions},
          {"deletions", r.deletions},
          {"insertions", r.insertions},
          {"ref_len", r.ref_len},
          {"char_errors", r.char_errors},
          {"char_ref_len", r.char_ref_len}};
}

namespace {

json target_json(const PruneTarget& t) {
  switch (t.type) {
    case PruneTarget::Type::selector: return {{"type", "selector"}, {"selector", selector_to_json(t.selector)}};
    case PruneTarget::Type::global: return {{"type", "global"}};
    case PruneTarget::Type::layer_block:
      return {{"type", "layer_block"}, {"side", to_string(t.side)}, {"block", to_string(t.block)}};
  }
  return nullptr;
}

PruneTarget target_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "selector") return PruneTarget::of(selector_from_json(j.at("selector")));
  if (type == "global") return PruneTarget::global();
  if (type == "layer_block")
    return PruneTarget::layer_block(parse_side(j.at("side").get<std::string>()),
                                    parse_block(j.at("block").get<std::string>()));
  throw FormatError("unknown sweep target type '" + type + "'");
}

}  // namespace

json to_json(const SweepResult& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    json cell = {{"target", target_json(c.target)},
                 {"selector", selector_to_json(c.selector)},
                 {"rho", c.rho},
                 {"ok", c.ok},
                 {"status", c.status}};
    if (c.ok) {
      cell["achieved"] = c.achieved;
      cell["clean"] = to_json(c.clean);
      cell["other"] = to_json(c.other);
      cell["delta_other"] = c.delta_other;
    }
    cells.push_back(cell);
  }
  return {{"baseline", {{"test_clean", to_json(r.baseline_clean)}, {"test_other", to_json(r.baseline_other)}}},
          {"cells", cells}};
}

SweepResult sweep_from_json(const json& j) {
  try {
    SweepResult r;
    r.baseline_clean.wer = j.at("baseline").at("test_clean").at("wer").get<double>();
    r.baseline_other.wer = j.at("baseline").at("test_other").at("wer").get<double>();
    for (const auto& c : j.at("cells")) {
      SweepCell cell;
      cell.target = target_from_json(c.at("target"));
      cell.selector = selector_from_json(c.at("selector"));
      cell.rho = c.at("rho").get<double>();
      cell.ok = c.at("ok").get<bool>();
      cell.status = c.at("status").get<std::string>();
      if (cell.ok) {
        cell.achieved = c.at("achieved").get<double>();
        cell.clean.wer = c.at("clean").at("wer").get<double>();
        cell.other.wer = c.at("other").at("wer").get<double>();
        cell.delta_other = c.at("delta_other").get<double>();
      }
      r.cells.push_back(std::move(cell));
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed sweep artifact: ") + e.what());
  }
}

// --- commands ---------------------------------------------------------------

TrainResult cmd_train(Workspace& ws) {
  const auto& cfg = ws.config();
  auto data = ws.data();
  Model model = Model::build(cfg.model);
  TrainResult r;
  r.curve = train(model, data.train.items, cfg.train);

  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < r.curve.size(); ++i) csv += std::to_string(i + 1) + "," + format_sig6(r.curve[i]) + "\n";
  save_checkpoint(model, ws.path(artifact::kCheckpoint));
  ws.record(artifact::kCheckpoint, "train");
  ws.write(artifact::kLossCurve, csv, "train");
  return r;
}

SensitivityReport cmd_diagnose(Workspace& ws, const std::optional<fs::path>& checkpoint) {
  Model model = ws.load_model(checkpoint);
  auto data = ws.data();
  const Dataset* splits[] = {&data.test_clean, &data.test_other};
  const auto modules = default_modules();
  auto report = diagnose(model, splits, modules, ws.config().diag_n);

  json rows = json::array();
  for (const auto& e : report.entries)
    rows.push_back({{"module", e.module},
                    {"selector", selector_to_json(e.selector)},
                    {"split", to_string(e.split)},
                    {"s_g", e.s_g},
                    {"s_h", e.s_h},
                    {"n", e.n}});
  ws.write(artifact::kSensitivityCsv, sensitivity_csv(report), "diagnose");
  ws.write(artifact::kSensitivityJson, json{{"config_hash", ws.hash()}, {"rows", rows}}.dump(1) + "\n", "diagnose");
  return report;
}

SweepResult cmd_sweep(Workspace& ws, const std::optional<fs::path>& checkpoint, SweepScope scope) {
  const auto& cfg = ws.config();
  const Model model = ws.load_model(checkpoint);
  auto data = ws.data();
  SweepOptions opts;
  opts.jobs = ws.jobs();

  std::vector<SweepRequest> reqs;
  switch (scope) {
    case SweepScope::global:
      for (double rho : cfg.grid) reqs.push_back({PruneTarget::global(), rho});
      break;
    case SweepScope::side:
      for (auto side : {Side::encoder, Side::decoder})
        for (double rho : cfg.grid) reqs.push_back({PruneTarget::of(Selector::weights(side)), rho});
      break;
    case SweepScope::layer_blocks:
      for (auto b : {Block::early, Block::mid, Block::late})
        for (auto side : {Side::encoder, Side::decoder})
          reqs.push_back({PruneTarget::layer_block(side, b), cfg.layer_block_rho});
      break;
    case SweepScope::components:
      for (const auto& s : component_selectors())
        for (double rho : cfg.grid) reqs.push_back({PruneTarget::of(s), rho});
      break;
  }
  auto result = run_sweep(model, reqs, data.test_clean, data.test_other, opts);
  bool any_ok = false;
  for (const auto& c : result.cells) any_ok = any_ok || c.ok;
  if (!any_ok) throw Error("every sweep cell failed; first status: " + result.cells.front().status);

  json j = to_json(result);
  j["config_hash"] = ws.hash();
  j["scope"] = to_string(scope);
  ws.write(artifact::sweep_csv(scope), sweep_csv(result), "sweep");
  ws.write(artifact::sweep_json(scope), j.dump(1) + "\n", "sweep");
  return result;
}

PrunePlan cmd_allocate(Workspace& ws) {
  const auto& cfg = ws.config();
  const auto src = ws.path(artifact::sweep_json(SweepScope::components));
  if (!fs::exists(src)) throw ConfigError(src.string() + " does not exist; run `sweep --scope components` first");
  const json j = read_json(src);
  if (j.value("config_hash", "") != ws.hash())
    throw MismatchError(src.string() + " was produced under a different config");
  const Model shape_only = Model::build(cfg.model);
  auto plan = greedy_allocate(sweep_from_json(j), shape_only.registry(), cfg.alloc_target, cfg.alloc_epsilon);
  json out = plan_to_json(plan);
  ws.write(artifact::kGreedyPlan, out.dump(1) + "\n", "allocate",
           {{"target", cfg.alloc_target}, {"epsilon", cfg.alloc_epsilon}, {"split", "test_other"}});
  return plan;
}

std::vector<CompressionRow> cmd_compress(Workspace& ws, const std::optional<fs::path>& checkpoint,
                                         const PlanSource& source) {
  const auto& cfg = ws.config();
  PrunePlan plan;
  if (source.recipe) {
    plan = paper_recipe(cfg.model.dec_layers);
  } else {
    const std::optional<fs::path> p = source.path ? source.path : cfg.plan ? std::optional<fs::path>(*cfg.plan)
                                                                             : std::nullopt;
    if (!p) throw ConfigError("compress needs --plan PATH, --recipe, or a `plan` entry in the config");
    try {
      plan = load_plan(*p);
    } catch (const FormatError& e) {
      throw PlanError(std::string("cannot use plan: ") + e.what());
    }
  }

  Model model = ws.load_model(checkpoint);
  try {
    validate_plan(plan, model.registry());
  } catch (const SelectorError& e) {
    throw PlanError(e.what());
  }
  auto data = ws.data();
  std::vector<CompressionRow> rows;
  rows.push_back({"baseline", evaluate(model, data.test_other), cost_report(model)});
  PlanApplication applied;
  try {
    applied = apply_plan(model, plan);
  } catch (const SelectorError& e) {
    throw PlanError(std::string("plan does not fit the model: ") + e.what());
  }
  rows.push_back({"pruned", evaluate(model, data.test_other), applied.cost});

  json table = json::array();
  for (const auto& r : rows)
    table.push_back({{"model", r.label},
                     {"test_other", to_json(r.rates)},
                     {"total_params", r.cost.total_params},
                     {"nonzero_params", r.cost.nonzero_params},
                     {"sparsity", r.cost.sparsity},
                     {"dense_flops", r.cost.dense_flops},
                     {"flops", r.cost.flops_per_step},
                     {"sparse_size_bytes", r.cost.sparse_size_bytes}});
  const json plan_json = plan_to_json(plan);
  save_checkpoint(model, ws.path(artifact::kPrunedCheckpoint));
  ws.record(artifact::kPrunedCheckpoint, "compress");
  ws.write(artifact::kPlanUsed, plan_json.dump(1) + "\n", "compress");
  ws.write(artifact::kCompressionCsv, compression_csv(rows), "compress", {{"plan", plan_json}});
  ws.write(artifact::kCompressionJson,
           json{{"config_hash", ws.hash()},
                {"plan", plan_json},
                {"planned_sparsity", overall_sparsity(plan, model.registry())},
                {"rows", table}}
                   .dump(1) +
               "\n",
           "compress");
  return rows;
}

nlohmann::json cmd_report(const fs::path& out_dir) {
  const auto manifest_path = out_dir / artifact::kManifest;
  if (!fs::exists(manifest_path)) throw ConsistencyError("no manifest in " + out_dir.string());
  const json manifest = read_json(manifest_path);
  if (manifest.value("schema_version", 0) != kSchemaVersion)
    throw ConsistencyError("manifest schema version is not " + std::to_string(kSchemaVersion));
  const auto& artifacts = manifest.at("artifacts");

  std::string hash;
  json listing = json::object();
  for (const auto& [name, entry] : artifacts.items()) {
    if (name == artifact::kReport) continue;
    const auto p = out_dir / name;
    if (!fs::exists(p)) throw ConsistencyError("artifact " + name + " is listed in the manifest but missing");
    if (sha256_hex(binio::read_file(p)) != entry.at("sha256").get<std::string>())
      throw ConsistencyError("artifact " + name + " was modified after it was recorded");
    const auto h = entry.at("config_hash").get<std::string>();
    if (hash.empty()) hash = h;
    if (h != hash) throw ConsistencyError("artifact " + name + " was produced under a different config");
    listing[name] = {{"command", entry.at("command")}, {"sha256", entry.at("sha256")}};
  }
  if (hash.empty()) throw ConsistencyError("manifest lists no artifacts");

  json report = {{"schema_version", kSchemaVersion}, {"config_hash", hash}, {"artifacts", listing}};
  auto merge = [&](const std::string& name, const char* key) {
    if (!listing.contains(name)) return;
    json j = read_json(out_dir / name);
    if (j.is_object()) {
      if (j.value("config_hash", hash) != hash) throw ConsistencyError(name + " carries a different config hash");
      j.erase("config_hash");
    }
    report[key] = j;
  };
  merge(artifact::kSensitivityJson, "sensitivity");
  for (auto s : {SweepScope::global, SweepScope::side, SweepScope::layer_blocks, SweepScope::components}) {
    const auto name = artifact::sweep_json(s);
    if (!listing.contains(name)) continue;
    json j = read_json(out_dir / name);
    if (j.value("config_hash", hash) != hash) throw ConsistencyError(name + " carries a different config hash");
    j.erase("config_hash");
    report["sweeps"][std::string(to_string(s))] = j;
    if (!report.contains("baseline")) report["baseline"] = j.at("baseline");
  }
  merge(artifact::kCompressionJson, "compression");
  merge(artifact::kGreedyPlan, "greedy_plan");

  binio::atomic_write(out_dir / artifact::kReport, report.dump(1) + "\n");
  return report;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const TrainingError*>(&e)) return 3;
  if (dynamic_cast<const MismatchError*>(&e) || dynamic_cast<const SnapshotError*>(&e)) return 4;
  if (dynamic_cast<const PlanError*>(&e)) return 5;
  if (dynamic_cast<const ConsistencyError*>(&e)) return 6;
  return 1;
}

}  // namespace prunelab
