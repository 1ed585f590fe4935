#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prunelab/tensor.hpp"

namespace prunelab {

enum class Side { encoder, decoder, shared };

/// Architectural component kinds, one per row family of the component table.
enum class Kind { conv, pos_emb, token_emb, self_attn, cross_attn, ffn, layer_norm, bias, output_proj };

inline constexpr std::array<Kind, 9> kAllKinds = {Kind::conv,       Kind::pos_emb, Kind::token_emb,
                                                  Kind::self_attn,  Kind::cross_attn, Kind::ffn,
                                                  Kind::layer_norm, Kind::bias,    Kind::output_proj};

/// Kinds that hold weight matrices (everything except biases and norms).
inline constexpr std::array<Kind, 7> kWeightKinds = {Kind::conv,      Kind::pos_emb,    Kind::token_emb,
                                                     Kind::self_attn, Kind::cross_attn, Kind::ffn,
                                                     Kind::output_proj};

std::string_view to_string(Side s);
std::string_view to_string(Kind k);
Side parse_side(std::string_view s);
Kind parse_kind(std::string_view s);

struct ComponentTag {
  Side side = Side::encoder;
  Kind kind = Kind::self_attn;
  std::optional<int> layer;  // 1-based transformer block index

  bool operator==(const ComponentTag&) const = default;
};

struct RegistryEntry {
  std::size_t id = 0;
  std::string name;
  ComponentTag tag;
  Shape shape;
  std::size_t count = 0;
};

/// Inclusive 1-based layer interval.
struct LayerRange {
  int first = 1;
  int last = 1;
  bool operator==(const LayerRange&) const = default;
};

/// Parameter filter over the registry. An unset field matches everything;
/// a set layer range only matches entries that carry a layer index.
struct Selector {
  std::optional<Side> side;
  std::optional<std::vector<Kind>> kinds;
  std::optional<LayerRange> layers;

  static Selector all() { return {}; }
  static Selector of(Side s, Kind k) { return {s, std::vector<Kind>{k}, std::nullopt}; }
  static Selector of(Kind k) { return {std::nullopt, std::vector<Kind>{k}, std::nullopt}; }
  static Selector weights(std::optional<Side> s = std::nullopt);

  bool matches(const ComponentTag& tag) const;
  bool operator==(const Selector&) const = default;

  std::string side_str() const;
  std::string kind_str() const;
  std::string layer_str() const;
  std::string str() const;
};

/// Addressing scheme for every trainable tensor of a model.
class ParameterRegistry {
 public:
  std::size_t add(std::string name, ComponentTag tag, Shape shape);

  const std::vector<RegistryEntry>& entries() const { return entries_; }
  const RegistryEntry& at(std::size_t id) const { return entries_.at(id); }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_count() const { return total_; }

  /// Ids matching `sel`, in registry order. May be empty.
  std::vector<std::size_t> resolve(const Selector& sel) const;
  std::size_t count(const Selector& sel) const;
  std::optional<std::size_t> find(std::string_view name) const;

 private:
  std::vector<RegistryEntry> entries_;
  std::size_t total_ = 0;
};

}  // namespace prunelab
