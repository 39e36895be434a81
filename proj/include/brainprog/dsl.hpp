#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brainprog/image.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::dsl {

enum class Dimension { Orientation, Color, Shape, Intensity, Merge };
inline constexpr std::array<Dimension, 4> kVisualDimensions = {Dimension::Orientation, Dimension::Color,
                                                                Dimension::Shape, Dimension::Intensity};

const char* dimension_name(Dimension d) noexcept;

enum class Kind { Terminal, Pointwise, Spatial };

enum class Op : std::uint8_t {
  Terminal,
  Add, Sub, Mul, DivP, Abs, SqrtP, LogP, ExpS, Complement, Max2, Min2, Half, Thr,
  Dx, Dy, Gauss1, Gauss2, OrientEdge,
  Dilate3, Erode3, Open3, Close3, SkelProxy,
  LocalMean3,
};

/// Terminal slots 0..9 are the color planes (image::Channel order); slot 10
/// is the conspicuity map bound for Merge trees.
inline constexpr int kConspicuitySlot = 10;
inline constexpr int kTerminalSlots = 11;

struct Primitive {
  std::string_view name;
  int arity;
  Kind kind;
  Op op;
  int terminal_slot = -1;
};

using PrimitiveId = std::uint16_t;

/// Every primitive known to the language; ids index into this table.
std::span<const Primitive> all_primitives() noexcept;
const Primitive& primitive(PrimitiveId id);
std::optional<PrimitiveId> find_primitive(std::string_view name) noexcept;

struct PrimitiveSet {
  std::vector<PrimitiveId> functions;
  std::vector<PrimitiveId> terminals;
  bool contains(PrimitiveId id) const noexcept;
};

/// Ids allowed in trees of the given dimension.
const PrimitiveSet& primitive_set(Dimension dim);
/// The same table as primitive descriptors (functions first, then terminals).
std::vector<Primitive> primitive_table(Dimension dim);

inline constexpr int kMaxDepth = 8;

/// A typed expression tree stored as its prefix (pre-order) node sequence.
/// Every subtree occupies a contiguous range [i, subtree_end(i)).
class ExprTree {
 public:
  /// Validates arity and that every node belongs to the dimension's table.
  ExprTree(Dimension dim, std::vector<PrimitiveId> prefix);

  Dimension dimension() const noexcept { return dim_; }
  std::span<const PrimitiveId> nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Node count on the longest root-to-leaf path (a lone terminal has depth 1).
  int depth() const;
  std::size_t subtree_end(std::size_t i) const;
  /// Depth of node i, the root being 1.
  int node_depth(std::size_t i) const;
  ExprTree subtree(std::size_t i) const;
  ExprTree replace_subtree(std::size_t i, std::span<const PrimitiveId> replacement) const;

  friend bool operator==(const ExprTree&, const ExprTree&) = default;

 private:
  Dimension dim_;
  std::vector<PrimitiveId> nodes_;
};

/// Empty when valid; otherwise a description of the first violation.
std::optional<std::string> check_tree(const ExprTree& tree, int max_depth = kMaxDepth);

enum class GrowMethod { Grow, Full };

/// Builds one tree of exactly `depth` (Full) or at most `depth` (Grow).
ExprTree generate_tree(Dimension dim, int depth, GrowMethod method, Rng& rng);
/// Ramped half-and-half: method by coin flip, target depth uniform in [2, depth_cap].
ExprTree random_tree(Dimension dim, int depth_cap, Rng& rng);
/// Grow-method subtree of depth at most max(1, depth_cap); depth_cap 1 yields a terminal.
ExprTree random_subtree(Dimension dim, int depth_cap, Rng& rng);

/// Terminal bindings for evaluation.
class Environment {
 public:
  Environment() { bindings_.fill(nullptr); }
  explicit Environment(const image::ColorDecomposition& dec);
  static Environment conspicuity(const image::ImageGrid& cm);

  void bind(int slot, const image::ImageGrid& grid) { bindings_[static_cast<std::size_t>(slot)] = &grid; }
  const image::ImageGrid* lookup(int slot) const noexcept { return bindings_[static_cast<std::size_t>(slot)]; }

 private:
  std::array<const image::ImageGrid*, kTerminalSlots> bindings_;
};

/// Bottom-up evaluation without the final rescale; values always finite.
image::ImageGrid evaluate_raw(const ExprTree& tree, const Environment& env);
/// evaluate_raw followed by min-max rescaling to [0, 1] (constant maps -> zeros).
image::ImageGrid evaluate_tree(const ExprTree& tree, const Environment& env);

/// Canonical prefix s-expression, e.g. "(add (gauss_1 r) v)".
std::string serialize(const ExprTree& tree);
ExprTree parse(std::string_view text, Dimension dim);

}  // namespace brainprog::dsl
