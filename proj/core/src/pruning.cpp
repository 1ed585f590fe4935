#include "prunelab/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "prunelab/binary_io.hpp"
#include "prunelab/errors.hpp"

namespace prunelab {

namespace {

void check_rho(double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ArgumentError("sparsity must lie in [0, 1], got " + std::to_string(rho));
}

std::vector<std::size_t> resolve_nonempty(const Model& model, const Selector& sel) {
  auto ids = model.registry().resolve(sel);
  if (ids.empty()) throw SelectorError("selector " + sel.str() + " matches no parameters");
  return ids;
}

struct Ranked {
  double mag;
  std::size_t order;  // position in the pooled (id, flat index) sequence
};

/// Returns the pooled positions of the k smallest magnitudes.
std::vector<std::size_t> smallest(const Model& model, const std::vector<std::size_t>& ids, std::size_t k,
                                  double* tau) {
  std::vector<Ranked> pool;
  for (auto id : ids)
    for (double w : model.param(id).data) pool.push_back({std::abs(w), pool.size()});
  auto less = [](const Ranked& a, const Ranked& b) {
    return a.mag < b.mag || (a.mag == b.mag && a.order < b.order);
  };
  *tau = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> out;
  if (k == 0) return out;
  std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k - 1), pool.end(), less);
  *tau = pool[k - 1].mag;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[i].order);
  return out;
}

PruneMask mask_for(const Model& model, const Selector& sel, const std::vector<std::size_t>& ids, double rho,
                   double* tau) {
  PruneMask m;
  m.selector = sel;
  m.rho = rho;
  m.param_ids = ids;
  for (auto id : ids) {
    m.retained.emplace_back(model.param(id).numel(), true);
    m.pooled += model.param(id).numel();
  }
  const auto k = pruned_count(rho, m.pooled);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (auto id : ids) {
    offsets.push_back(off);
    off += model.param(id).numel();
  }
  for (std::size_t pos : smallest(model, ids, k, tau)) {
    const auto t = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), pos) - offsets.begin()) - 1;
    m.retained[t][pos - offsets[t]] = false;
  }
  m.pruned = k;
  return m;
}

std::string to_hex(const std::vector<bool>& bits) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < bits.size(); i += 8) {
    unsigned byte = 0;
    for (std::size_t b = 0; b < 8 && i + b < bits.size(); ++b) byte |= (bits[i + b] ? 1u : 0u) << b;
    s += digits[byte >> 4];
    s += digits[byte & 15];
  }
  return s;
}

std::vector<bool> from_hex(const std::string& s, std::size_t n) {
  if (s.size() != 2 * ((n + 7) / 8)) throw FormatError("mask bitset has wrong length");
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FormatError("bad hex digit in mask");
  };
  std::vector<bool> bits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned byte = nibble(s[2 * (i / 8)]) << 4 | nibble(s[2 * (i / 8) + 1]);
    bits[i] = (byte >> (i % 8)) & 1u;
  }
  return bits;
}

}  // namespace

std::size_t pruned_count(double rho, std::size_t d) {
  check_rho(rho);
  const double exact = rho * static_cast<double>(d);
  auto k = static_cast<std::size_t>(std::floor(exact + 1e-9));
  return std::min(k, d);
}

double magnitude_threshold(const Model& model, const Selector& sel, double rho) {
  check_rho(rho);
  const auto ids = resolve_nonempty(model, sel);
  std::size_t d = 0;
  for (auto id : ids) d += model.param(id).numel();
  double tau = 0.0;
  smallest(model, ids, pruned_count(rho, d), &tau);
  return tau;
}

PruneMask select_weights(const Model& model, const Selector& sel, double rho) {
  check_rho(rho);
  double tau = 0.0;
  return mask_for(model, sel, resolve_nonempty(model, sel), rho, &tau);
}

void apply_mask(Model& model, const PruneMask& mask) {
  for (std::size_t t = 0; t < mask.param_ids.size(); ++t) {
    auto& data = model.param(mask.param_ids[t]).data;
    const auto& keep = mask.retained[t];
    if (keep.size() != data.size()) throw DimensionError("mask does not match parameter size");
    for (std::size_t j = 0; j < data.size(); ++j)
      if (!keep[j]) data[j] = 0.0;
  }
}

PruneMask prune(Model& model, const Selector& sel, double rho) {
  auto mask = select_weights(model, sel, rho);
  apply_mask(model, mask);
  return mask;
}

PruneMask prune_global(Model& model, double rho) { return prune(model, Selector::weights(), rho); }

std::string_view to_string(Block b) {
  switch (b) {
    case Block::early: return "early";
    case Block::mid: return "mid";
    case Block::late: return "late";
  }
  return "?";
}

Block parse_block(std::string_view s) {
  for (auto b : {Block::early, Block::mid, Block::late})
    if (to_string(b) == s) return b;
  throw ArgumentError("unknown layer block '" + std::string(s) + "'");
}

LayerRange block_layers(int layers, Block b) {
  if (layers < 3) throw ArgumentError("layer blocks need at least 3 layers");
  const int base = layers / 3, rem = layers % 3;
  const int early = base + (rem > 0 ? 1 : 0);
  const int mid = base + (rem > 1 ? 1 : 0);
  switch (b) {
    case Block::early: return {1, early};
    case Block::mid: return {early + 1, early + mid};
    case Block::late: return {early + mid + 1, layers};
  }
  return {1, layers};
}

PruneMask prune_layer_block(Model& model, Side side, Block block, double rho) {
  check_rho(rho);
  const int L = side == Side::encoder ? model.config().enc_layers : model.config().dec_layers;
  const auto range = block_layers(L, block);
  const std::vector<Kind> kinds = {Kind::self_attn, Kind::cross_attn, Kind::ffn};

  PruneMask out;
  out.selector = Selector{side, kinds, range};
  out.rho = rho;
  // Thresholds are computed per layer before any layer is modified.
  std::vector<PruneMask> per_layer;
  for (int l = range.first; l <= range.last; ++l)
    per_layer.push_back(select_weights(model, Selector{side, kinds, LayerRange{l, l}}, rho));
  for (auto& m : per_layer) {
    apply_mask(model, m);
    out.param_ids.insert(out.param_ids.end(), m.param_ids.begin(), m.param_ids.end());
    for (auto& r : m.retained) out.retained.push_back(std::move(r));
    out.pooled += m.pooled;
    out.pruned += m.pruned;
  }
  return out;
}

nlohmann::json selector_to_json(const Selector& sel) {
  nlohmann::json j = nlohmann::json::object();
  j["side"] = sel.side ? nlohmann::json(std::string(to_string(*sel.side))) : nlohmann::json(nullptr);
  if (sel.kinds) {
    auto arr = nlohmann::json::array();
    for (auto k : *sel.kinds) arr.push_back(std::string(to_string(k)));
    j["kinds"] = arr;
  } else {
    j["kinds"] = nullptr;
  }
  j["layers"] = sel.layers ? nlohmann::json::array({sel.layers->first, sel.layers->last}) : nlohmann::json(nullptr);
  return j;
}

Selector selector_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("selector must be a JSON object");
  Selector s;
  if (j.contains("side") && !j["side"].is_null()) s.side = parse_side(j["side"].get<std::string>());
  if (j.contains("kinds") && !j["kinds"].is_null()) {
    std::vector<Kind> ks;
    for (const auto& k : j["kinds"]) ks.push_back(parse_kind(k.get<std::string>()));
    if (ks.empty()) throw FormatError("selector kind list is empty");
    s.kinds = std::move(ks);
  }
  if (j.contains("layers") && !j["layers"].is_null()) {
    const auto& l = j["layers"];
    if (!l.is_array() || l.size() != 2) throw FormatError("selector layers must be [first, last]");
    s.layers = LayerRange{l[0].get<int>(), l[1].get<int>()};
    if (s.layers->first < 1 || s.layers->last < s.layers->first) throw FormatError("bad selector layer range");
  }
  return s;
}

void save_mask(const PruneMask& mask, const Model& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "prunelab-mask";
  j["version"] = 1;
  j["selector"] = selector_to_json(mask.selector);
  j["rho"] = mask.rho;
  j["pooled"] = mask.pooled;
  j["pruned"] = mask.pruned;
  auto params = nlohmann::json::array();
  for (std::size_t t = 0; t < mask.param_ids.size(); ++t) {
    const auto& e = model.registry().at(mask.param_ids[t]);
    params.push_back({{"name", e.name}, {"count", e.count}, {"retained", to_hex(mask.retained[t])}});
  }
  j["params"] = params;
  binio::atomic_write(path, j.dump(1) + "\n");
}

PruneMask load_mask(const Model& model, const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mask file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "prunelab-mask" || j.value("version", 0) != 1)
    throw FormatError("not a version-1 prunelab mask file");
  PruneMask m;
  m.selector = selector_from_json(j.at("selector"));
  m.rho = j.at("rho").get<double>();
  m.pooled = j.at("pooled").get<std::size_t>();
  m.pruned = j.at("pruned").get<std::size_t>();
  for (const auto& p : j.at("params")) {
    const auto id = model.registry().find(p.at("name").get<std::string>());
    if (!id) throw FormatError("mask names unknown parameter " + p.at("name").get<std::string>());
    const auto count = p.at("count").get<std::size_t>();
    if (count != model.registry().at(*id).count) throw FormatError("mask parameter size mismatch");
    m.param_ids.push_back(*id);
    m.retained.push_back(from_hex(p.at("retained").get<std::string>(), count));
  }
  return m;
}

}  // namespace prunelab
