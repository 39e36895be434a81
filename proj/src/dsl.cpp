#include "brainprog/dsl.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "brainprog/error.hpp"

namespace brainprog::dsl {

using image::ImageGrid;

namespace {

constexpr Primitive kPrimitives[] = {
    // pointwise core
    {"add", 2, Kind::Pointwise, Op::Add},
    {"sub", 2, Kind::Pointwise, Op::Sub},
    {"mul", 2, Kind::Pointwise, Op::Mul},
    {"div_p", 2, Kind::Pointwise, Op::DivP},
    {"abs", 1, Kind::Pointwise, Op::Abs},
    {"sqrt_p", 1, Kind::Pointwise, Op::SqrtP},
    {"log_p", 1, Kind::Pointwise, Op::LogP},
    {"exp_s", 1, Kind::Pointwise, Op::ExpS},
    {"complement", 1, Kind::Pointwise, Op::Complement},
    {"max2", 2, Kind::Pointwise, Op::Max2},
    {"min2", 2, Kind::Pointwise, Op::Min2},
    {"half", 1, Kind::Pointwise, Op::Half},
    {"thr", 1, Kind::Pointwise, Op::Thr},
    // spatial
    {"dx", 1, Kind::Spatial, Op::Dx},
    {"dy", 1, Kind::Spatial, Op::Dy},
    {"gauss_1", 1, Kind::Spatial, Op::Gauss1},
    {"gauss_2", 1, Kind::Spatial, Op::Gauss2},
    {"orient_edge", 1, Kind::Spatial, Op::OrientEdge},
    {"dilate_3", 1, Kind::Spatial, Op::Dilate3},
    {"erode_3", 1, Kind::Spatial, Op::Erode3},
    {"open_3", 1, Kind::Spatial, Op::Open3},
    {"close_3", 1, Kind::Spatial, Op::Close3},
    {"skel_proxy", 1, Kind::Spatial, Op::SkelProxy},
    {"local_mean_3", 1, Kind::Spatial, Op::LocalMean3},
    // terminals
    {"r", 0, Kind::Terminal, Op::Terminal, 0},
    {"g", 0, Kind::Terminal, Op::Terminal, 1},
    {"b", 0, Kind::Terminal, Op::Terminal, 2},
    {"c", 0, Kind::Terminal, Op::Terminal, 3},
    {"m", 0, Kind::Terminal, Op::Terminal, 4},
    {"y", 0, Kind::Terminal, Op::Terminal, 5},
    {"k", 0, Kind::Terminal, Op::Terminal, 6},
    {"h", 0, Kind::Terminal, Op::Terminal, 7},
    {"s", 0, Kind::Terminal, Op::Terminal, 8},
    {"v", 0, Kind::Terminal, Op::Terminal, 9},
    {"cm", 0, Kind::Terminal, Op::Terminal, kConspicuitySlot},
};

PrimitiveId id_of(std::string_view name) {
  auto id = find_primitive(name);
  if (!id) throw Error("unknown primitive '" + std::string(name) + "'");
  return *id;
}

PrimitiveSet make_set(std::initializer_list<std::string_view> extra_functions,
                      std::initializer_list<std::string_view> terminals) {
  PrimitiveSet set;
  for (const auto& p : kPrimitives) {
    if (p.kind == Kind::Pointwise) set.functions.push_back(id_of(p.name));
  }
  for (auto name : extra_functions) set.functions.push_back(id_of(name));
  for (auto name : terminals) set.terminals.push_back(id_of(name));
  return set;
}

int arity(PrimitiveId id) { return kPrimitives[id].arity; }

}  // namespace

const char* dimension_name(Dimension d) noexcept {
  switch (d) {
    case Dimension::Orientation: return "orientation";
    case Dimension::Color: return "color";
    case Dimension::Shape: return "shape";
    case Dimension::Intensity: return "intensity";
    case Dimension::Merge: return "merge";
  }
  return "?";
}

std::span<const Primitive> all_primitives() noexcept { return kPrimitives; }

const Primitive& primitive(PrimitiveId id) {
  if (id >= std::size(kPrimitives)) throw Error("primitive id out of range");
  return kPrimitives[id];
}

std::optional<PrimitiveId> find_primitive(std::string_view name) noexcept {
  for (std::size_t i = 0; i < std::size(kPrimitives); ++i) {
    if (kPrimitives[i].name == name) return static_cast<PrimitiveId>(i);
  }
  return std::nullopt;
}

bool PrimitiveSet::contains(PrimitiveId id) const noexcept {
  return std::find(functions.begin(), functions.end(), id) != functions.end() ||
         std::find(terminals.begin(), terminals.end(), id) != terminals.end();
}

const PrimitiveSet& primitive_set(Dimension dim) {
  static const PrimitiveSet orientation =
      make_set({"dx", "dy", "gauss_1", "gauss_2", "orient_edge"}, {"r", "g", "b", "k", "v"});
  static const PrimitiveSet color = make_set({}, {"r", "g", "b", "c", "m", "y", "k", "h", "s", "v"});
  static const PrimitiveSet shape =
      make_set({"dilate_3", "erode_3", "open_3", "close_3", "skel_proxy"}, {"r", "g", "b", "k", "v"});
  static const PrimitiveSet intensity =
      make_set({"gauss_1", "gauss_2", "local_mean_3"}, {"r", "g", "b", "k", "v"});
  static const PrimitiveSet merge = make_set({}, {"cm"});
  switch (dim) {
    case Dimension::Orientation: return orientation;
    case Dimension::Color: return color;
    case Dimension::Shape: return shape;
    case Dimension::Intensity: return intensity;
    case Dimension::Merge: return merge;
  }
  throw Error("invalid dimension");
}

std::vector<Primitive> primitive_table(Dimension dim) {
  const auto& set = primitive_set(dim);
  std::vector<Primitive> out;
  for (auto id : set.functions) out.push_back(kPrimitives[id]);
  for (auto id : set.terminals) out.push_back(kPrimitives[id]);
  return out;
}

// ---------------------------------------------------------------------------
// ExprTree

ExprTree::ExprTree(Dimension dim, std::vector<PrimitiveId> prefix) : dim_(dim), nodes_(std::move(prefix)) {
  if (nodes_.empty()) throw Error("ExprTree: empty node sequence");
  const auto& set = primitive_set(dim);
  long open = 1;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (open <= 0) throw Error("ExprTree: trailing nodes after a complete tree");
    if (!set.contains(nodes_[i])) {
      throw Error("ExprTree: primitive '" + std::string(primitive(nodes_[i]).name) + "' not allowed in " +
                  dimension_name(dim) + " trees");
    }
    open += arity(nodes_[i]) - 1;
  }
  if (open != 0) throw Error("ExprTree: node sequence is not a complete tree");
}

std::size_t ExprTree::subtree_end(std::size_t i) const {
  long open = 1;
  while (open > 0) {
    open += arity(nodes_[i]) - 1;
    ++i;
  }
  return i;
}

namespace {

std::vector<int> node_depths(std::span<const PrimitiveId> nodes) {
  std::vector<int> depths(nodes.size());
  // Stack of (depth of parent, children still expected).
  std::vector<std::pair<int, int>> stack;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const int d = stack.empty() ? 1 : stack.back().first + 1;
    depths[i] = d;
    if (!stack.empty() && --stack.back().second == 0) stack.pop_back();
    if (arity(nodes[i]) > 0) stack.emplace_back(d, arity(nodes[i]));
  }
  return depths;
}

}  // namespace

int ExprTree::depth() const {
  const auto d = node_depths(nodes_);
  return *std::max_element(d.begin(), d.end());
}

int ExprTree::node_depth(std::size_t i) const { return node_depths(nodes_).at(i); }

ExprTree ExprTree::subtree(std::size_t i) const {
  return ExprTree(dim_, std::vector<PrimitiveId>(nodes_.begin() + static_cast<long>(i),
                                                 nodes_.begin() + static_cast<long>(subtree_end(i))));
}

ExprTree ExprTree::replace_subtree(std::size_t i, std::span<const PrimitiveId> replacement) const {
  std::vector<PrimitiveId> out(nodes_.begin(), nodes_.begin() + static_cast<long>(i));
  out.insert(out.end(), replacement.begin(), replacement.end());
  out.insert(out.end(), nodes_.begin() + static_cast<long>(subtree_end(i)), nodes_.end());
  return ExprTree(dim_, std::move(out));
}

std::optional<std::string> check_tree(const ExprTree& tree, int max_depth) {
  const auto& set = primitive_set(tree.dimension());
  long open = 1;
  bool has_terminal = false;
  for (auto id : tree.nodes()) {
    if (open <= 0) return "trailing nodes";
    if (!set.contains(id)) return "primitive '" + std::string(primitive(id).name) + "' outside table";
    open += arity(id) - 1;
    has_terminal |= arity(id) == 0;
  }
  if (open != 0) return "arity mismatch";
  if (!has_terminal) return "no terminal";
  if (tree.depth() > max_depth) return "depth " + std::to_string(tree.depth()) + " exceeds " + std::to_string(max_depth);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Random generation

namespace {

void grow_nodes(const PrimitiveSet& set, int depth, int target, GrowMethod method, bool force_function,
                Rng& rng, std::vector<PrimitiveId>& out) {
  PrimitiveId id;
  if (depth >= target) {
    id = set.terminals[rng.index(set.terminals.size())];
  } else if (method == GrowMethod::Full || force_function) {
    id = set.functions[rng.index(set.functions.size())];
  } else {
    const std::size_t pick = rng.index(set.functions.size() + set.terminals.size());
    id = pick < set.functions.size() ? set.functions[pick] : set.terminals[pick - set.functions.size()];
  }
  out.push_back(id);
  for (int c = 0; c < arity(id); ++c) grow_nodes(set, depth + 1, target, method, false, rng, out);
}

}  // namespace

ExprTree generate_tree(Dimension dim, int depth, GrowMethod method, Rng& rng) {
  if (depth < 1) throw Error("generate_tree: depth must be >= 1");
  std::vector<PrimitiveId> nodes;
  grow_nodes(primitive_set(dim), 1, depth, method, depth > 1, rng, nodes);
  return ExprTree(dim, std::move(nodes));
}

ExprTree random_tree(Dimension dim, int depth_cap, Rng& rng) {
  if (depth_cap < 2 || depth_cap > kMaxDepth) throw Error("random_tree: depth_cap outside [2, max_depth]");
  const GrowMethod method = rng.bernoulli(0.5) ? GrowMethod::Grow : GrowMethod::Full;
  const int target = static_cast<int>(rng.uniform_int(2, depth_cap));
  return generate_tree(dim, target, method, rng);
}

ExprTree random_subtree(Dimension dim, int depth_cap, Rng& rng) {
  std::vector<PrimitiveId> nodes;
  grow_nodes(primitive_set(dim), 1, std::max(1, depth_cap), GrowMethod::Grow, false, rng, nodes);
  return ExprTree(dim, std::move(nodes));
}

// ---------------------------------------------------------------------------
// Evaluation

Environment::Environment(const image::ColorDecomposition& dec) {
  bindings_.fill(nullptr);
  for (int c = 0; c < image::kChannelCount; ++c) bindings_[static_cast<std::size_t>(c)] = &dec.planes[c];
}

Environment Environment::conspicuity(const ImageGrid& cm) {
  Environment env;
  env.bind(kConspicuitySlot, cm);
  return env;
}

namespace {

constexpr double kValueLimit = 1e12;

void sanitize(ImageGrid& g) {
  for (auto& v : g.values()) {
    if (std::isnan(v)) v = 0.0;
    v = std::clamp(v, -kValueLimit, kValueLimit);
  }
}

template <class F>
ImageGrid map1(ImageGrid a, F f) {
  for (auto& v : a.values()) v = f(v);
  return a;
}

template <class F>
ImageGrid map2(ImageGrid a, const ImageGrid& b, F f) {
  if (!a.same_shape(b)) throw EvaluationError("operand maps differ in size");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = f(a[i], b[i]);
  return a;
}

ImageGrid central_difference(const ImageGrid& a, bool horizontal) {
  ImageGrid out(a.width(), a.height());
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      out.at(x, y) = horizontal ? 0.5 * (a.clamped(x + 1, y) - a.clamped(x - 1, y))
                                : 0.5 * (a.clamped(x, y + 1) - a.clamped(x, y - 1));
    }
  }
  return out;
}

enum class Window { Max, Min, Mean };

ImageGrid window3(const ImageGrid& a, Window kind) {
  ImageGrid out(a.width(), a.height());
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      double acc = kind == Window::Max ? -std::numeric_limits<double>::infinity()
                   : kind == Window::Min ? std::numeric_limits<double>::infinity()
                                         : 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const double v = a.clamped(x + dx, y + dy);
          if (kind == Window::Max) acc = std::max(acc, v);
          else if (kind == Window::Min) acc = std::min(acc, v);
          else acc += v;
        }
      }
      out.at(x, y) = kind == Window::Mean ? acc / 9.0 : acc;
    }
  }
  return out;
}

class Evaluator {
 public:
  Evaluator(const ExprTree& tree, const Environment& env) : nodes_(tree.nodes()), env_(env) {}

  ImageGrid run() {
    pos_ = 0;
    return eval();
  }

 private:
  ImageGrid eval() {
    const Primitive& p = primitive(nodes_[pos_++]);
    if (p.op == Op::Terminal) {
      const ImageGrid* bound = env_.lookup(p.terminal_slot);
      if (bound == nullptr) throw EvaluationError("unbound terminal '" + std::string(p.name) + "'");
      return *bound;
    }
    ImageGrid a = eval();
    ImageGrid out;
    if (p.arity == 2) {
      const ImageGrid b = eval();
      out = binary(p.op, std::move(a), b);
    } else {
      out = unary(p.op, std::move(a));
    }
    sanitize(out);
    return out;
  }

  static ImageGrid binary(Op op, ImageGrid a, const ImageGrid& b) {
    switch (op) {
      case Op::Add: return map2(std::move(a), b, [](double x, double y) { return x + y; });
      case Op::Sub: return map2(std::move(a), b, [](double x, double y) { return x - y; });
      case Op::Mul: return map2(std::move(a), b, [](double x, double y) { return x * y; });
      case Op::DivP:
        return map2(std::move(a), b, [](double x, double y) { return std::abs(y) < 1e-6 ? 1.0 : x / y; });
      case Op::Max2: return map2(std::move(a), b, [](double x, double y) { return std::max(x, y); });
      case Op::Min2: return map2(std::move(a), b, [](double x, double y) { return std::min(x, y); });
      default: throw EvaluationError("not a binary operator");
    }
  }

  static ImageGrid unary(Op op, ImageGrid a) {
    switch (op) {
      case Op::Abs: return map1(std::move(a), [](double x) { return std::abs(x); });
      case Op::SqrtP: return map1(std::move(a), [](double x) { return std::sqrt(std::abs(x)); });
      case Op::LogP: {
        ImageGrid out = map1(std::move(a), [](double x) { return std::log(std::abs(x) + 1e-6); });
        image::normalize_minmax_inplace(out);
        return out;
      }
      case Op::ExpS: return map1(std::move(a), [](double x) { return std::exp(std::min(x, 10.0)); });
      case Op::Complement: return map1(std::move(a), [](double x) { return 1.0 - x; });
      case Op::Half: return map1(std::move(a), [](double x) { return 0.5 * x; });
      case Op::Thr: {
        const double m = image::mean(a);
        return map1(std::move(a), [m](double x) { return x > m ? 1.0 : 0.0; });
      }
      case Op::Dx: return central_difference(a, true);
      case Op::Dy: return central_difference(a, false);
      case Op::Gauss1: return image::gaussian_blur(a, 1.0);
      case Op::Gauss2: return image::gaussian_blur(a, 2.0);
      case Op::OrientEdge: {
        ImageGrid dx = central_difference(a, true);
        const ImageGrid dy = central_difference(a, false);
        return map2(std::move(dx), dy, [](double x, double y) { return std::abs(x) + std::abs(y); });
      }
      case Op::Dilate3: return window3(a, Window::Max);
      case Op::Erode3: return window3(a, Window::Min);
      case Op::Open3: return window3(window3(a, Window::Min), Window::Max);
      case Op::Close3: return window3(window3(a, Window::Max), Window::Min);
      case Op::SkelProxy: {
        const ImageGrid eroded = window3(a, Window::Min);
        return map2(std::move(a), eroded, [](double x, double y) { return x - y; });
      }
      case Op::LocalMean3: return window3(a, Window::Mean);
      default: throw EvaluationError("not a unary operator");
    }
  }

  std::span<const PrimitiveId> nodes_;
  const Environment& env_;
  std::size_t pos_ = 0;
};

}  // namespace

ImageGrid evaluate_raw(const ExprTree& tree, const Environment& env) { return Evaluator(tree, env).run(); }

ImageGrid evaluate_tree(const ExprTree& tree, const Environment& env) {
  ImageGrid out = evaluate_raw(tree, env);
  image::normalize_minmax_inplace(out);
  return out;
}

// ---------------------------------------------------------------------------
// Text form

namespace {

void write_node(std::span<const PrimitiveId> nodes, std::size_t& pos, std::string& out) {
  const Primitive& p = primitive(nodes[pos++]);
  if (p.arity == 0) {
    out += p.name;
    return;
  }
  out += '(';
  out += p.name;
  for (int c = 0; c < p.arity; ++c) {
    out += ' ';
    write_node(nodes, pos, out);
  }
  out += ')';
}

class Parser {
 public:
  Parser(std::string_view text, Dimension dim) : text_(text), set_(primitive_set(dim)) {}

  std::vector<PrimitiveId> run() {
    std::vector<PrimitiveId> nodes;
    skip_space();
    if (pos_ >= text_.size()) throw ParseError("empty expression", pos_);
    node(nodes);
    skip_space();
    if (pos_ < text_.size()) {
      if (text_[pos_] == ')') throw ParseError("unbalanced ')'", pos_);
      throw ParseError("unexpected trailing input", pos_);
    }
    return nodes;
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  PrimitiveId symbol() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != '(' && text_[pos_] != ')' &&
           !std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      ++pos_;
    }
    if (start == pos_) throw ParseError("expected a symbol", start);
    const std::string_view name = text_.substr(start, pos_ - start);
    const auto id = find_primitive(name);
    if (!id || !set_.contains(*id)) throw ParseError("unknown symbol '" + std::string(name) + "'", start);
    return *id;
  }

  void node(std::vector<PrimitiveId>& nodes) {
    skip_space();
    if (pos_ >= text_.size()) throw ParseError("unbalanced parentheses: unexpected end of input", pos_);
    if (text_[pos_] == ')') throw ParseError("unbalanced ')'", pos_);
    if (text_[pos_] != '(') {
      const std::size_t at = pos_;
      const PrimitiveId id = symbol();
      if (arity(id) != 0) {
        throw ParseError("arity mismatch: '" + std::string(primitive(id).name) + "' expects " +
                             std::to_string(arity(id)) + " argument(s), got 0",
                         at);
      }
      nodes.push_back(id);
      return;
    }
    const std::size_t open_at = pos_++;
    skip_space();
    const std::size_t name_at = pos_;
    const PrimitiveId id = symbol();
    if (arity(id) == 0) throw ParseError("terminal '" + std::string(primitive(id).name) + "' in parentheses", name_at);
    nodes.push_back(id);
    int count = 0;
    for (;;) {
      skip_space();
      if (pos_ >= text_.size()) throw ParseError("unbalanced parentheses: missing ')'", open_at);
      if (text_[pos_] == ')') {
        ++pos_;
        break;
      }
      node(nodes);
      ++count;
    }
    if (count != arity(id)) {
      throw ParseError("arity mismatch: '" + std::string(primitive(id).name) + "' expects " +
                           std::to_string(arity(id)) + " argument(s), got " + std::to_string(count),
                       open_at);
    }
  }

  std::string_view text_;
  const PrimitiveSet& set_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const ExprTree& tree) {
  std::string out;
  std::size_t pos = 0;
  write_node(tree.nodes(), pos, out);
  return out;
}

ExprTree parse(std::string_view text, Dimension dim) { return ExprTree(dim, Parser(text, dim).run()); }

}  // namespace brainprog::dsl
