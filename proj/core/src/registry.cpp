#include "prunelab/registry.hpp"

#include <algorithm>

#include "prunelab/errors.hpp"

namespace prunelab {

std::string_view to_string(Side s) {
  switch (s) {
    case Side::encoder: return "encoder";
    case Side::decoder: return "decoder";
    case Side::shared: return "shared";
  }
  return "?";
}

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::conv: return "conv";
    case Kind::pos_emb: return "pos_emb";
    case Kind::token_emb: return "token_emb";
    case Kind::self_attn: return "self_attn";
    case Kind::cross_attn: return "cross_attn";
    case Kind::ffn: return "ffn";
    case Kind::layer_norm: return "layer_norm";
    case Kind::bias: return "bias";
    case Kind::output_proj: return "output_proj";
  }
  return "?";
}

Side parse_side(std::string_view s) {
  for (auto v : {Side::encoder, Side::decoder, Side::shared})
    if (to_string(v) == s) return v;
  throw SelectorError("unknown side '" + std::string(s) + "'");
}

Kind parse_kind(std::string_view s) {
  for (auto k : kAllKinds)
    if (to_string(k) == s) return k;
  throw SelectorError("unknown component kind '" + std::string(s) + "'");
}

Selector Selector::weights(std::optional<Side> s) {
  return {s, std::vector<Kind>(kWeightKinds.begin(), kWeightKinds.end()), std::nullopt};
}

bool Selector::matches(const ComponentTag& tag) const {
  if (side && *side != tag.side) return false;
  if (kinds && std::find(kinds->begin(), kinds->end(), tag.kind) == kinds->end()) return false;
  if (layers) {
    if (!tag.layer) return false;
    if (*tag.layer < layers->first || *tag.layer > layers->last) return false;
  }
  return true;
}

std::string Selector::side_str() const { return side ? std::string(to_string(*side)) : "all"; }

std::string Selector::kind_str() const {
  if (!kinds) return "all";
  std::vector<Kind> ks = *kinds;
  std::sort(ks.begin(), ks.end());
  std::vector<Kind> w(kWeightKinds.begin(), kWeightKinds.end());
  std::sort(w.begin(), w.end());
  if (ks == w) return "weights";
  std::string out;
  for (auto k : *kinds) {
    if (!out.empty()) out += "+";
    out += to_string(k);
  }
  return out;
}

std::string Selector::layer_str() const {
  if (!layers) return "all";
  return std::to_string(layers->first) + "-" + std::to_string(layers->last);
}

std::string Selector::str() const { return side_str() + "/" + kind_str() + "/" + layer_str(); }

std::size_t ParameterRegistry::add(std::string name, ComponentTag tag, Shape shape) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  const bool ok = [&] {
    switch (tag.kind) {
      case Kind::cross_attn: return tag.side == Side::decoder;
      case Kind::conv:
      case Kind::pos_emb: return tag.side != Side::decoder;
      case Kind::token_emb:
      case Kind::output_proj: return tag.side != Side::encoder;
      default: return true;
    }
  }();
  if (!ok)
    throw ConfigError("parameter '" + name + "': kind " + std::string(to_string(tag.kind)) + " cannot live on side " +
                      std::string(to_string(tag.side)));
  RegistryEntry e;
  e.id = entries_.size();
  e.name = std::move(name);
  e.tag = tag;
  e.count = shape_numel(shape);
  e.shape = std::move(shape);
  total_ += e.count;
  entries_.push_back(std::move(e));
  return entries_.back().id;
}

std::vector<std::size_t> ParameterRegistry::resolve(const Selector& sel) const {
  std::vector<std::size_t> ids;
  for (const auto& e : entries_)
    if (sel.matches(e.tag)) ids.push_back(e.id);
  return ids;
}

std::size_t ParameterRegistry::count(const Selector& sel) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (sel.matches(e.tag)) n += e.count;
  return n;
}

std::optional<std::size_t> ParameterRegistry::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.id;
  return std::nullopt;
}

}  // namespace prunelab
