#include "prunelab/planner.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "prunelab/binary_io.hpp"
#include "prunelab/errors.hpp"

namespace prunelab {

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::recipe: return "recipe";
    case Provenance::greedy: return "greedy";
    case Provenance::manual: return "manual";
  }
  return "?";
}

Provenance parse_provenance(std::string_view s) {
  for (auto p : {Provenance::recipe, Provenance::greedy, Provenance::manual})
    if (to_string(p) == s) return p;
  throw FormatError("unknown plan provenance '" + std::string(s) + "'");
}

void validate_plan(const PrunePlan& plan, const ParameterRegistry& registry) {
  std::vector<int> owner(registry.size(), -1);
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    const auto& e = plan.entries[i];
    if (!(e.rho >= 0.0 && e.rho <= 1.0))
      throw PlanError("plan entry " + e.selector.str() + " has sparsity outside [0, 1]");
    for (auto id : registry.resolve(e.selector)) {
      if (owner[id] >= 0)
        throw PlanError("plan entries " + plan.entries[owner[id]].selector.str() + " and " + e.selector.str() +
                        " overlap on " + registry.at(id).name);
      owner[id] = static_cast<int>(i);
    }
  }
}

double overall_sparsity(const PrunePlan& plan, const ParameterRegistry& registry) {
  validate_plan(plan, registry);
  std::size_t pruned = 0;
  for (const auto& e : plan.entries) pruned += pruned_count(e.rho, registry.count(e.selector));
  return static_cast<double>(pruned) / static_cast<double>(registry.total_count());
}

PrunePlan paper_recipe(int dec_layers) {
  const auto E = Side::encoder, D = Side::decoder;
  auto ffn_block = [&](Block b) { return Selector{D, std::vector<Kind>{Kind::ffn}, block_layers(dec_layers, b)}; };
  PrunePlan p;
  p.provenance = Provenance::recipe;
  p.entries = {
      {Selector::of(E, Kind::conv), 0.20},       {Selector::of(E, Kind::self_attn), 0.40},
      {Selector::of(E, Kind::ffn), 0.55},        {Selector::of(D, Kind::self_attn), 0.50},
      {Selector::of(D, Kind::cross_attn), 0.45}, {ffn_block(Block::early), 0.25},
      {ffn_block(Block::mid), 0.45},             {ffn_block(Block::late), 0.30},
      {Selector::of(D, Kind::token_emb), 0.25},  {Selector::of(D, Kind::output_proj), 0.25},
  };
  return p;
}

PlanApplication apply_plan(Model& model, const PrunePlan& plan) {
  validate_plan(plan, model.registry());
  const auto snap = model.snapshot();
  PlanApplication out;
  try {
    for (const auto& e : plan.entries) out.masks.push_back(select_weights(model, e.selector, e.rho));
    for (const auto& m : out.masks) apply_mask(model, m);
  } catch (...) {
    model.restore(snap);
    throw;
  }
  out.cost = cost_report(model);
  return out;
}

namespace {

struct Option {
  double rho;
  double delta;
  std::size_t pruned;
};

struct State {
  std::size_t pruned = 0;
  double delta = 0.0;
  std::vector<std::uint8_t> choice;
};

/// (delta, pruned, choice) lexicographic order: the allocator's objective.
bool better(const State& a, const State& b) {
  if (a.delta != b.delta) return a.delta < b.delta;
  if (a.pruned != b.pruned) return a.pruned < b.pruned;
  return a.choice < b.choice;
}

/// Keeps, per pruned count, the best state, then drops states beaten in delta
/// by a state that prunes more.
std::vector<State> pareto(std::vector<State> states) {
  std::sort(states.begin(), states.end(), [](const State& a, const State& b) {
    if (a.pruned != b.pruned) return a.pruned > b.pruned;
    return better(a, b);
  });
  std::vector<State> out;
  double best_delta = std::numeric_limits<double>::infinity();
  for (auto& s : states) {
    if (!out.empty() && out.back().pruned == s.pruned) continue;
    if (s.delta > best_delta) continue;
    best_delta = std::min(best_delta, s.delta);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

PrunePlan greedy_allocate(const SweepResult& sweep, const ParameterRegistry& registry, double target,
                          double epsilon) {
  if (sweep.cells.empty()) throw ArgumentError("cannot allocate from an empty sweep");
  if (!(target >= 0.0 && target <= 1.0)) throw ArgumentError("target sparsity must lie in [0, 1]");

  std::vector<Selector> selectors;
  std::vector<std::map<double, double>> admissible;  // rho -> delta, first cell wins
  for (const auto& c : sweep.cells) {
    if (c.target.type != PruneTarget::Type::selector) continue;
    auto it = std::find(selectors.begin(), selectors.end(), c.target.selector);
    std::size_t s = static_cast<std::size_t>(it - selectors.begin());
    if (it == selectors.end()) {
      selectors.push_back(c.target.selector);
      admissible.emplace_back();
    }
    if (c.ok && c.rho > 0.0 && c.delta_other <= epsilon) admissible[s].emplace(c.rho, c.delta_other);
  }
  if (selectors.empty()) throw ArgumentError("sweep has no selector cells to allocate over");
  {
    PrunePlan probe;
    for (const auto& s : selectors) probe.entries.push_back({s, 0.0});
    validate_plan(probe, registry);
  }

  std::vector<std::vector<Option>> options(selectors.size());
  for (std::size_t s = 0; s < selectors.size(); ++s) {
    const std::size_t d = registry.count(selectors[s]);
    options[s].push_back({0.0, 0.0, 0});
    for (const auto& [rho, delta] : admissible[s]) options[s].push_back({rho, delta, pruned_count(rho, d)});
  }

  const double total = static_cast<double>(registry.total_count());
  auto feasible = [&](std::size_t pruned) { return static_cast<double>(pruned) / total >= target; };

  std::vector<State> front{State{}};
  for (std::size_t s = 0; s < selectors.size(); ++s) {
    std::vector<State> next;
    next.reserve(front.size() * options[s].size());
    for (const auto& st : front) {
      for (std::size_t o = 0; o < options[s].size(); ++o) {
        State n = st;
        n.pruned += options[s][o].pruned;
        n.delta += options[s][o].delta;
        n.choice.push_back(static_cast<std::uint8_t>(o));
        next.push_back(std::move(n));
      }
    }
    front = pareto(std::move(next));
  }

  const State* best = nullptr;
  for (const auto& st : front)
    if (feasible(st.pruned) && (!best || better(st, *best))) best = &st;

  PrunePlan plan;
  plan.provenance = Provenance::greedy;
  for (std::size_t s = 0; s < selectors.size(); ++s) {
    const std::size_t o = best ? best->choice[s] : options[s].size() - 1;
    if (options[s][o].rho > 0.0) plan.entries.push_back({selectors[s], options[s][o].rho});
  }
  plan.infeasible = best == nullptr;
  return plan;
}

nlohmann::json plan_to_json(const PrunePlan& plan) {
  nlohmann::json j;
  j["format"] = "prunelab-plan";
  j["version"] = 1;
  j["provenance"] = std::string(to_string(plan.provenance));
  j["infeasible"] = plan.infeasible;
  auto entries = nlohmann::json::array();
  for (const auto& e : plan.entries) {
    auto item = selector_to_json(e.selector);
    item["rho"] = e.rho;
    entries.push_back(item);
  }
  j["entries"] = entries;
  return j;
}

PrunePlan plan_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "prunelab-plan" || j.value("version", 0) != 1)
      throw FormatError("not a version-1 prunelab plan");
    PrunePlan p;
    p.provenance = parse_provenance(j.at("provenance").get<std::string>());
    p.infeasible = j.value("infeasible", false);
    for (const auto& item : j.at("entries")) p.entries.push_back({selector_from_json(item), item.at("rho").get<double>()});
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  } catch (const SelectorError& e) {
    throw FormatError(std::string("malformed plan: ") + e.what());
  }
}

void save_plan(const PrunePlan& plan, const std::filesystem::path& path) {
  binio::atomic_write(path, plan_to_json(plan).dump(1) + "\n");
}

PrunePlan load_plan(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan file is not valid JSON: ") + e.what());
  }
  return plan_from_json(j);
}

ParameterRegistry whisper_small_registry() {
  constexpr std::size_t d = 768, f = 3072, mels = 80, vocab = 51865, audio_ctx = 1500, text_ctx = 448, k = 3;
  constexpr int layers = 12;
  ParameterRegistry R;
  auto add = [&](const std::string& name, Side side, Kind kind, std::optional<int> layer, Shape shape) {
    R.add(name, ComponentTag{side, kind, layer}, std::move(shape));
  };
  auto attention = [&](const std::string& p, Side side, Kind kind, int l) {
    add(p + ".q.weight", side, kind, l, {d, d});
    add(p + ".q.bias", side, Kind::bias, l, {d});
    add(p + ".k.weight", side, kind, l, {d, d});
    add(p + ".v.weight", side, kind, l, {d, d});
    add(p + ".v.bias", side, Kind::bias, l, {d});
    add(p + ".out.weight", side, kind, l, {d, d});
    add(p + ".out.bias", side, Kind::bias, l, {d});
  };
  auto norm = [&](const std::string& p, Side side, std::optional<int> l) {
    add(p + ".weight", side, Kind::layer_norm, l, {d});
    add(p + ".bias", side, Kind::layer_norm, l, {d});
  };
  auto ffn = [&](const std::string& p, Side side, int l) {
    add(p + ".fc1.weight", side, Kind::ffn, l, {d, f});
    add(p + ".fc1.bias", side, Kind::bias, l, {f});
    add(p + ".fc2.weight", side, Kind::ffn, l, {f, d});
    add(p + ".fc2.bias", side, Kind::bias, l, {d});
  };

  const auto E = Side::encoder, D = Side::decoder;
  add("encoder.conv1.weight", E, Kind::conv, std::nullopt, {d, mels, k});
  add("encoder.conv1.bias", E, Kind::bias, std::nullopt, {d});
  add("encoder.conv2.weight", E, Kind::conv, std::nullopt, {d, d, k});
  add("encoder.conv2.bias", E, Kind::bias, std::nullopt, {d});
  add("encoder.positional_embedding", E, Kind::pos_emb, std::nullopt, {audio_ctx, d});
  for (int l = 1; l <= layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    norm(p + ".attn_ln", E, l);
    attention(p + ".attn", E, Kind::self_attn, l);
    norm(p + ".ffn_ln", E, l);
    ffn(p + ".ffn", E, l);
  }
  norm("encoder.ln_post", E, std::nullopt);

  add("decoder.token_embedding", D, Kind::token_emb, std::nullopt, {vocab, d});
  add("decoder.positional_embedding", Side::shared, Kind::pos_emb, std::nullopt, {text_ctx, d});
  for (int l = 1; l <= layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    norm(p + ".attn_ln", D, l);
    attention(p + ".attn", D, Kind::self_attn, l);
    norm(p + ".cross_attn_ln", D, l);
    attention(p + ".cross_attn", D, Kind::cross_attn, l);
    norm(p + ".ffn_ln", D, l);
    ffn(p + ".ffn", D, l);
  }
  norm("decoder.ln", D, std::nullopt);
  return R;
}

}  // namespace prunelab
