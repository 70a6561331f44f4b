#include "malfuse/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <sstream>

namespace malfuse {

std::string to_string(FeatureSet s) {
  switch (s) {
    case FeatureSet::integrated: return "integrated";
    case FeatureSet::static_only: return "static";
    case FeatureSet::dynamic_only: return "dynamic";
  }
  return "integrated";
}

FeatureSet feature_set_from_string(const std::string& s) {
  if (s == "integrated") return FeatureSet::integrated;
  if (s == "static" || s == "static_only") return FeatureSet::static_only;
  if (s == "dynamic" || s == "dynamic_only") return FeatureSet::dynamic_only;
  throw ConfigError("unknown feature set '" + s + "' (expected integrated, static or dynamic)");
}

std::vector<FeatureName> features_of(FeatureSet s) {
  std::vector<FeatureName> out;
  for (FeatureName f : kAllFeatures)
    if (s == FeatureSet::integrated || (s == FeatureSet::static_only) == is_static(f)) out.push_back(f);
  return out;
}

std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::component: return "component";
    case NodeKind::concat: return "concat";
    case NodeKind::dense: return "dense";
    case NodeKind::softmax: return "softmax";
    case NodeKind::pretrained: return "pretrained";
    case NodeKind::ovr: return "ovr";
  }
  return "input";
}

namespace {

NodeKind node_kind_from_string(const std::string& s) {
  for (NodeKind k : {NodeKind::input, NodeKind::component, NodeKind::concat, NodeKind::dense, NodeKind::softmax,
                     NodeKind::pretrained, NodeKind::ovr})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown node kind '" + s + "'");
}

std::size_t parse_width(const std::string& s, const std::string& id) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || v == 0 || s[0] == '-') throw ConfigError("node " + id + ": bad width '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

const FusionNode& FusionTopology::node(const std::string& id) const {
  for (const FusionNode& n : nodes)
    if (n.id == id) return n;
  throw ConfigError("topology has no node '" + id + "'");
}

void FusionTopology::validate() {
  if (nodes.empty()) throw ConfigError("topology is empty");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!index.emplace(nodes[i].id, i).second) throw ConfigError("duplicate node id '" + nodes[i].id + "'");

  std::vector<std::size_t> dependents(nodes.size(), 0);
  for (const FusionNode& n : nodes) {
    const std::size_t arity = n.deps.size();
    const bool leaf = n.kind == NodeKind::input || n.kind == NodeKind::component;
    const bool unary = n.kind == NodeKind::dense || n.kind == NodeKind::softmax || n.kind == NodeKind::pretrained;
    if (leaf && arity != 0) throw ConfigError("node " + n.id + ": " + to_string(n.kind) + " takes no inputs");
    if (unary && arity != 1) throw ConfigError("node " + n.id + ": " + to_string(n.kind) + " takes exactly one input");
    if (!leaf && arity == 0) throw ConfigError("node " + n.id + ": " + to_string(n.kind) + " needs inputs");
    if ((n.kind == NodeKind::dense || n.kind == NodeKind::pretrained) && n.width == 0) {
      throw ConfigError("node " + n.id + ": width must be positive");
    }
    for (const std::string& d : n.deps) {
      const auto it = index.find(d);
      if (it == index.end()) throw ConfigError("node " + n.id + " depends on unknown node '" + d + "'");
      ++dependents[it->second];
    }
  }

  // Kahn's algorithm, taking ready nodes in declaration order.
  std::vector<FusionNode> sorted;
  std::vector<bool> done(nodes.size(), false);
  while (sorted.size() < nodes.size()) {
    bool progressed = false;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (done[i]) continue;
      std::size_t missing = 0;
      for (const std::string& d : nodes[i].deps) missing += !done[index[d]];
      if (missing == 0) {
        done[i] = true;
        sorted.push_back(nodes[i]);
        progressed = true;
        break;
      }
    }
    if (!progressed) throw ConfigError("topology contains a cycle");
  }

  std::vector<std::string> roots;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (dependents[i] == 0) roots.push_back(nodes[i].id);
  if (roots.size() != 1) {
    std::string list;
    for (const auto& r : roots) list += " " + r;
    throw ConfigError("topology must have exactly one root, found" + list);
  }
  if (!nodes[index[roots[0]]].is_head()) {
    throw ConfigError("root " + roots[0] + " must emit a probability vector (softmax, pretrained or ovr)");
  }
  nodes = std::move(sorted);
}

const FusionNode& FusionTopology::root() const {
  std::set<std::string> used;
  for (const FusionNode& n : nodes) used.insert(n.deps.begin(), n.deps.end());
  for (const FusionNode& n : nodes)
    if (!used.count(n.id)) return n;
  throw ConfigError("topology has no root");
}

std::set<std::string> FusionTopology::ancestors(const std::string& id) const {
  std::set<std::string> seen;
  std::vector<std::string> stack{id};
  while (!stack.empty()) {
    const std::string cur = stack.back();
    stack.pop_back();
    if (!seen.insert(cur).second) continue;
    for (const std::string& d : node(cur).deps) stack.push_back(d);
  }
  return seen;
}

std::set<FeatureName> FusionTopology::features() const {
  std::set<FeatureName> out;
  for (const std::string& id : ancestors(root().id)) {
    const FusionNode& n = node(id);
    if (n.kind == NodeKind::input || n.kind == NodeKind::component) out.insert(n.feature);
  }
  return out;
}

std::map<std::string, std::size_t> FusionTopology::widths(const std::map<FeatureName, std::size_t>& feature_widths,
                                                          std::size_t families) const {
  std::map<std::string, std::size_t> w;
  // Nodes may be unsorted before validate(); resolve recursively.
  std::function<std::size_t(const FusionNode&)> width_of = [&](const FusionNode& n) -> std::size_t {
    if (const auto it = w.find(n.id); it != w.end()) return it->second;
    std::size_t out = 0;
    switch (n.kind) {
      case NodeKind::input: {
        const auto it = feature_widths.find(n.feature);
        if (it == feature_widths.end()) throw ShapeError("node " + n.id + ": no width known for " + to_string(n.feature));
        out = it->second;
        break;
      }
      case NodeKind::component:
      case NodeKind::softmax:
      case NodeKind::pretrained:
        out = families;
        break;
      case NodeKind::concat:
        for (const std::string& d : n.deps) out += width_of(node(d));
        break;
      case NodeKind::dense:
        out = n.width;
        break;
      case NodeKind::ovr:
        for (const std::string& d : n.deps) {
          if (width_of(node(d)) != families) {
            throw ShapeError("node " + n.id + ": ovr input " + d + " has width " + std::to_string(width_of(node(d))) +
                             ", expected " + std::to_string(families));
          }
        }
        out = families;
        break;
    }
    for (const std::string& d : n.deps) width_of(node(d));
    w[n.id] = out;
    return out;
  };
  for (const FusionNode& n : nodes) width_of(n);
  return w;
}

std::string FusionTopology::to_dsl() const {
  std::ostringstream out;
  out << "# topology " << name << "\n";
  for (const FusionNode& n : nodes) {
    out << n.id << " " << to_string(n.kind);
    if (n.kind == NodeKind::input || n.kind == NodeKind::component) out << " " << to_string(n.feature);
    if (n.kind == NodeKind::dense || n.kind == NodeKind::pretrained) out << " " << n.width;
    if (n.kind == NodeKind::pretrained || n.kind == NodeKind::ovr) out << " " << to_string(n.mode);
    if (!n.deps.empty()) {
      out << " <-";
      for (const std::string& d : n.deps) out << " " << d;
    }
    out << "\n";
  }
  return out.str();
}

FusionTopology FusionTopology::parse(std::string_view text) {
  FusionTopology t;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string w; ls >> w;) tok.push_back(w);
    if (tok.empty()) continue;
    if (tok[0] == "#") {
      if (tok.size() == 3 && tok[1] == "topology") t.name = tok[2];
      continue;
    }
    if (tok[0][0] == '#') continue;
    const std::string where = "topology line " + std::to_string(line_no) + ": ";
    if (tok.size() < 2) throw ConfigError(where + "expected '<id> <kind> ...'");
    FusionNode n;
    n.id = tok[0];
    n.kind = node_kind_from_string(tok[1]);
    const auto arrow = std::find(tok.begin(), tok.end(), "<-");
    std::vector<std::string> args(tok.begin() + 2, arrow);
    if (arrow != tok.end()) n.deps.assign(arrow + 1, tok.end());
    std::size_t expected = 0;
    switch (n.kind) {
      case NodeKind::input:
      case NodeKind::component:
        expected = 1;
        if (args.size() == 1) n.feature = feature_from_string(args[0]);
        break;
      case NodeKind::dense:
        expected = 1;
        if (args.size() == 1) n.width = parse_width(args[0], n.id);
        break;
      case NodeKind::pretrained:
        expected = 2;
        if (args.size() == 2) n.width = parse_width(args[0], n.id), n.mode = weight_mode_from_string(args[1]);
        break;
      case NodeKind::ovr:
        expected = 1;
        if (args.size() == 1) n.mode = weight_mode_from_string(args[0]);
        break;
      case NodeKind::concat:
      case NodeKind::softmax:
        break;
    }
    if (args.size() != expected) {
      throw ConfigError(where + to_string(n.kind) + " takes " + std::to_string(expected) + " argument(s)");
    }
    t.nodes.push_back(std::move(n));
  }
  t.validate();
  return t;
}

// --- Presets --------------------------------------------------------------------

std::string to_string(Preset p) {
  switch (p) {
    case Preset::ef1: return "EF1";
    case Preset::ef2: return "EF2";
    case Preset::lf1: return "LF1";
    case Preset::lf2: return "LF2";
    case Preset::if1: return "IF1";
    case Preset::if2: return "IF2";
    case Preset::ens_fixed: return "ENS_FIXED";
    case Preset::ens_train: return "ENS_TRAIN";
  }
  return "EF1";
}

Preset preset_from_string(const std::string& s) {
  std::string norm;
  for (char c : s) norm += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (Preset p : kAllPresets)
    if (to_string(p) == norm) return p;
  throw ConfigError("unknown preset '" + s + "'");
}

std::vector<FeatureName> cascade_order(const ComponentManifest& manifest, FeatureSet set) {
  const auto features = features_of(set);
  return manifest.ascending(features);
}

namespace {

struct Builder {
  FusionTopology t;

  std::string input(FeatureName f) {
    const std::string id = "in_" + to_string(f);
    add({id, NodeKind::input, f, 0, WeightMode::fixed, {}});
    return id;
  }
  std::string component(FeatureName f) {
    const std::string id = "comp_" + to_string(f);
    add({id, NodeKind::component, f, 0, WeightMode::fixed, {}});
    return id;
  }
  std::string node(const std::string& id, NodeKind kind, std::vector<std::string> deps, std::size_t width = 0,
                   WeightMode mode = WeightMode::fixed) {
    add({id, kind, FeatureName::pe_onehot, width, mode, std::move(deps)});
    return id;
  }
  void add(FusionNode n) {
    for (const FusionNode& m : t.nodes)
      if (m.id == n.id) return;
    t.nodes.push_back(std::move(n));
  }
};

// concat(first two) -> stage; concat(stage, next) -> stage; ...
// `leaf` maps a feature to its entry node; `stage` builds one stage node.
std::string cascade(Builder& b, const std::vector<FeatureName>& order, const std::string& prefix,
                    const std::function<std::string(FeatureName)>& leaf,
                    const std::function<std::string(const std::string&, const std::string&)>& stage) {
  if (order.size() == 1) return stage(prefix + "1", leaf(order[0]));
  std::string prev = leaf(order[0]);
  for (std::size_t k = 1; k < order.size(); ++k) {
    const std::string cat = b.node(prefix + "cat" + std::to_string(k), NodeKind::concat, {prev, leaf(order[k])});
    prev = stage(prefix + std::to_string(k), cat);
  }
  return prev;
}

void require_components(const ComponentManifest& manifest, const std::vector<FeatureName>& features) {
  for (FeatureName f : features)
    if (!manifest.contains(f)) throw ConfigError("component manifest is missing " + to_string(f));
}

}  // namespace

FusionTopology make_preset(Preset preset, const ComponentManifest& manifest, FeatureSet set,
                           const PresetOptions& options) {
  const std::vector<FeatureName> features = features_of(set);
  const std::size_t width = options.dense_width;
  Builder b;
  b.t.name = to_string(preset) + "-" + to_string(set);
  auto dense_stage = [&](const std::string& id, const std::string& in) {
    return b.node("stage" + id, NodeKind::dense, {in}, width);
  };
  auto pretrained_stage = [&](const std::string& id, const std::string& in) {
    return b.node("stage" + id, NodeKind::pretrained, {in}, width, options.stage_mode);
  };
  auto input = [&](FeatureName f) { return b.input(f); };
  auto component = [&](FeatureName f) { return b.component(f); };

  switch (preset) {
    case Preset::ef1: {
      std::vector<std::string> ins;
      for (FeatureName f : features) ins.push_back(b.input(f));
      b.node("root", NodeKind::softmax, {b.node("dense", NodeKind::dense, {b.node("concat", NodeKind::concat, ins)}, width)});
      break;
    }
    case Preset::ef2: {
      require_components(manifest, features);
      b.node("root", NodeKind::softmax, {cascade(b, manifest.ascending(features), "", input, dense_stage)});
      break;
    }
    case Preset::lf1:
      require_components(manifest, features);
      cascade(b, manifest.ascending(features), "", component, pretrained_stage);
      break;
    case Preset::if2:
      require_components(manifest, features);
      cascade(b, manifest.ascending(features), "", input, pretrained_stage);
      break;
    case Preset::lf2: {
      require_components(manifest, features);
      std::vector<std::string> comps;
      for (FeatureName f : features) comps.push_back(b.component(f));
      b.node("root", NodeKind::softmax, {b.node("dense", NodeKind::dense, {b.node("concat", NodeKind::concat, comps)}, width)});
      break;
    }
    case Preset::if1: {
      // Static chain over the call-graph pair then imports; dynamic chain
      // over co-occurrence and statements then frequencies; the trace
      // embedding joins at the root.
      auto chain = [&](const std::string& side, std::vector<FeatureName> order) -> std::string {
        std::vector<FeatureName> present;
        for (FeatureName f : order)
          if (std::find(features.begin(), features.end(), f) != features.end()) present.push_back(f);
        if (present.empty()) return "";
        if (present.size() == 1) return b.input(present[0]);
        return cascade(b, present, side, input, [&](const std::string& id, const std::string& in) {
          return b.node(id, NodeKind::pretrained, {in}, width, options.stage_mode);
        });
      };
      std::vector<std::string> parts;
      for (const std::string& p :
           {chain("left", {FeatureName::cg_embedding, FeatureName::cg_lowfreq, FeatureName::pe_onehot}),
            chain("right", {FeatureName::cooc_feat, FeatureName::stmt_embed, FeatureName::api_freq})})
        if (!p.empty()) parts.push_back(p);
      if (std::find(features.begin(), features.end(), FeatureName::pv_trace) != features.end()) {
        parts.push_back(b.input(FeatureName::pv_trace));
      }
      const std::string joined = b.node("root_concat", NodeKind::concat, parts);
      b.node("root", NodeKind::softmax, {b.node("root_dense", NodeKind::dense, {joined}, width)});
      break;
    }
    case Preset::ens_fixed:
    case Preset::ens_train: {
      require_components(manifest, features);
      std::vector<std::string> comps;
      for (FeatureName f : features) comps.push_back(b.component(f));
      b.node("root", NodeKind::ovr, comps, 0, preset == Preset::ens_fixed ? WeightMode::fixed : WeightMode::trainable);
      break;
    }
  }
  b.t.validate();
  return b.t;
}

// --- Model ----------------------------------------------------------------------

std::size_t FusionInputs::rows() const {
  for (const auto& [f, t] : features) return t.rows();
  for (const auto& [f, t] : component_probs) return t.rows();
  return 0;
}

FusionModel::FusionModel(FusionTopology topology, std::size_t families,
                         std::map<FeatureName, ComponentModel> components, const FusionConfig& config)
    : topology_(std::move(topology)), families_(families), components_(std::move(components)), config_(config) {
  topology_.validate();
  if (families_ == 0) throw ConfigError("fusion: families must be positive");
  std::map<FeatureName, std::size_t> feature_widths;
  for (const auto& [f, c] : components_) {
    if (c.families() != families_) {
      throw ShapeError("component " + to_string(f) + " has " + std::to_string(c.families()) + " outputs, expected " +
                       std::to_string(families_));
    }
    feature_widths[f] = c.input_width();
  }
  for (const FusionNode& n : topology_.nodes) {
    if (n.kind == NodeKind::input && !components_.count(n.feature)) {
      throw ConfigError("node " + n.id + " needs the " + to_string(n.feature) + " component for its standardizer");
    }
  }
  widths_ = topology_.widths(feature_widths, families_);

  for (std::size_t i = 0; i < topology_.nodes.size(); ++i) {
    const FusionNode& n = topology_.nodes[i];
    Rng rng(derive_seed(config.hp.seed, {0xf05e, i}));
    NodeState s;
    const std::size_t in = n.deps.size() == 1 ? widths_.at(n.deps[0]) : 0;
    switch (n.kind) {
      case NodeKind::dense:
        s.hidden = Dense("fusion." + n.id, in, n.width, config.hp.activation, rng);
        break;
      case NodeKind::softmax:
        s.head = Dense("fusion." + n.id, in, families_, Activation::linear, rng);
        break;
      case NodeKind::pretrained:
        s.hidden = Dense("fusion." + n.id + ".h", in, n.width, config.hp.activation, rng);
        s.head = Dense("fusion." + n.id + ".out", n.width, families_, Activation::linear, rng);
        break;
      case NodeKind::ovr: {
        const std::size_t M = n.deps.size();
        if (n.mode == WeightMode::fixed) {
          s.ovr_weights = {"fusion." + n.id + ".w", Tensor::matrix(M, families_, 1.0), false};
          s.ovr_bias = {"fusion." + n.id + ".b", Tensor::matrix(1, families_), false};
        } else {
          // Positive draws: every member starts as a (randomly weighted) vote.
          Tensor w = Tensor::matrix(M, families_);
          for (double& x : w.data) x = rng.uniform();
          s.ovr_weights = {"fusion." + n.id + ".w", std::move(w)};
          s.ovr_bias = {"fusion." + n.id + ".b", Tensor::matrix(1, families_)};
        }
        break;
      }
      case NodeKind::input:
      case NodeKind::component:
      case NodeKind::concat:
        break;
    }
    state_.emplace(n.id, std::move(s));
  }
}

namespace {

// Parameters owned by a node; const-ness follows the state.
template <class State>
auto node_params(State& s, const FusionNode& n) -> std::vector<decltype(&s.head.weight)> {
  switch (n.kind) {
    case NodeKind::dense: return {&s.hidden.weight, &s.hidden.bias};
    case NodeKind::softmax: return {&s.head.weight, &s.head.bias};
    case NodeKind::pretrained: return {&s.hidden.weight, &s.hidden.bias, &s.head.weight, &s.head.bias};
    case NodeKind::ovr:
      if (n.mode == WeightMode::fixed) return {};
      return {&s.ovr_weights, &s.ovr_bias};
    default: return {};
  }
}

}  // namespace

std::vector<Parameter*> FusionModel::parameters_of(const std::string& id) {
  return node_params(state_.at(id), topology_.node(id));
}

std::vector<const Parameter*> FusionModel::node_parameters(const std::string& id) const {
  return node_params(state_.at(id), topology_.node(id));
}

std::size_t FusionModel::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const FusionNode& node : topology_.nodes)
    for (const Parameter* p : node_parameters(node.id)) n += p->trainable ? p->value.size() : 0;
  return n;
}

FusionModel::Data FusionModel::prepare(const FusionInputs& inputs) const {
  Data d;
  for (const FusionNode& n : topology_.nodes) {
    if (n.kind == NodeKind::input && !d.features.count(n.feature)) {
      const auto it = inputs.features.find(n.feature);
      if (it == inputs.features.end()) throw Error("fusion input is missing feature " + to_string(n.feature));
      d.features[n.feature] = components_.at(n.feature).standardizer().apply(it->second);
    }
    if (n.kind == NodeKind::component && !d.probs.count(n.feature)) {
      if (const auto it = inputs.component_probs.find(n.feature); it != inputs.component_probs.end()) {
        if (it->second.cols() != families_) throw ShapeError("component probabilities for " + to_string(n.feature) + " have the wrong width");
        d.probs[n.feature] = it->second;
        continue;
      }
      const auto it = inputs.features.find(n.feature);
      if (it == inputs.features.end()) throw Error("fusion input is missing feature " + to_string(n.feature));
      const auto comp = components_.find(n.feature);
      if (comp == components_.end()) throw Error("fusion model has no component for " + to_string(n.feature));
      d.probs[n.feature] = comp->second.predict_rows(it->second);
    }
  }
  return d;
}

Var FusionModel::forward(Tape& t, const Data& data, std::span<const std::size_t> rows, const std::string& target,
                         const Mode& mode, std::map<std::string, Var>* logits) const {
  const std::set<std::string> needed = topology_.ancestors(target);
  std::map<std::string, Var> out;
  for (const FusionNode& n : topology_.nodes) {
    if (!needed.count(n.id)) continue;
    const NodeState& s = state_.at(n.id);
    std::vector<Var> in;
    for (const std::string& d : n.deps) in.push_back(out.at(d));
    Var y;
    auto dropout = [&](Var h) {
      return mode.training && config_.hp.dropout > 0.0 && mode.rng ? ops::dropout(t, h, config_.hp.dropout, *mode.rng) : h;
    };
    switch (n.kind) {
      case NodeKind::input: y = t.constant(gather_rows(data.features.at(n.feature), rows)); break;
      case NodeKind::component: y = t.constant(gather_rows(data.probs.at(n.feature), rows)); break;
      case NodeKind::concat: y = in.size() == 1 ? in[0] : ops::concat_cols(t, in); break;
      case NodeKind::dense: y = dropout(s.hidden.forward(t, in[0])); break;
      case NodeKind::softmax: {
        Var z = s.head.forward(t, in[0]);
        if (logits) (*logits)[n.id] = z;
        y = ops::activate(t, z, Activation::softmax);
        break;
      }
      case NodeKind::pretrained: {
        Var z = s.head.forward(t, dropout(s.hidden.forward(t, in[0])));
        if (logits) (*logits)[n.id] = z;
        y = ops::activate(t, z, Activation::softmax);
        break;
      }
      case NodeKind::ovr: {
        Var z = ops::ovr_scores(t, in.size() == 1 ? in[0] : ops::concat_cols(t, in), t.parameter(s.ovr_weights),
                                t.parameter(s.ovr_bias));
        if (n.mode == WeightMode::fixed) {
          // Unweighted mean of the member probabilities.
          y = ops::normalize_rows(t, ops::scale(t, z, 1.0 / static_cast<double>(in.size())));
        } else {
          if (logits) (*logits)[n.id] = z;
          y = ops::normalize_rows(t, ops::activate(t, z, Activation::sigmoid));
        }
        break;
      }
    }
    out[n.id] = y;
  }
  return out.at(target);
}

Tensor FusionModel::predict_rows(const FusionInputs& inputs) const {
  const Data data = prepare(inputs);
  const std::size_t n = inputs.rows();
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  Tape t;
  return t.value(forward(t, data, rows, topology_.root().id, Mode{}));
}

namespace {

struct StageTask {
  FusionModel& model;
  const FusionModel::Data& data;
  std::span<const int> labels;
  std::vector<Parameter*> params;
  std::string head;
  bool binary = false;

  std::vector<Parameter*> parameters() { return params; }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode& mode) {
    std::map<std::string, Var> logits;
    model.forward(t, data, idx, head, mode, &logits);
    Var z = logits.at(head);
    std::vector<int> ys;
    for (std::size_t i : idx) ys.push_back(labels[i]);
    BatchResult r;
    if (binary) {
      Tensor targets = Tensor::matrix(idx.size(), model.families());
      for (std::size_t i = 0; i < idx.size(); ++i) targets(i, static_cast<std::size_t>(ys[i])) = 1.0;
      r.loss = ops::sigmoid_binary_cross_entropy(t, z, targets);
    } else {
      r.loss = ops::softmax_cross_entropy(t, z, ys);
    }
    const Tensor& zv = t.value(z);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (static_cast<int>(argmax(zv.row(i))) == ys[i]) ++r.correct;
    return r;
  }
};

}  // namespace

FusionModel train_fusion(const FusionTopology& topology, const std::map<FeatureName, FeatureTable>& tables,
                         const std::map<FeatureName, ComponentModel>& components, std::span<const int> labels,
                         std::size_t families, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const FusionConfig& config) {
  FusionTopology topo = topology;
  topo.validate();
  std::map<FeatureName, ComponentModel> used;
  FusionInputs inputs;
  for (FeatureName f : topo.features()) {
    const auto c = components.find(f);
    if (c == components.end()) throw ConfigError("fusion needs a trained " + to_string(f) + " component");
    const auto t = tables.find(f);
    if (t == tables.end()) throw Error("fusion input is missing feature " + to_string(f));
    if (t->second.size() != labels.size()) throw ShapeError("feature table " + to_string(f) + " is not row-aligned with the labels");
    used.emplace(f, c->second);
    inputs.features[f] = t->second.values;
  }
  FusionModel model(std::move(topo), families, std::move(used), config);
  const FusionModel::Data data = model.prepare(inputs);
  const FusionTopology& graph = model.topology_;

  auto set_flags = [&](const std::set<std::string>& scope, const std::string& stage_node) {
    for (const FusionNode& n : graph.nodes)
      for (Parameter* p : model.parameters_of(n.id)) p->trainable = false;
    std::vector<Parameter*> params;
    for (const FusionNode& n : graph.nodes) {
      if (!scope.count(n.id)) continue;
      FusionModel::NodeState& s = model.state_.at(n.id);
      const bool fine_tune = n.kind == NodeKind::pretrained && n.mode == WeightMode::trainable;
      if (s.trained && !fine_tune && n.id != stage_node) continue;
      for (Parameter* p : model.parameters_of(n.id)) p->trainable = true, params.push_back(p);
    }
    return params;
  };
  auto run_stage = [&](const std::string& head) {
    const std::set<std::string> scope = graph.ancestors(head);
    StageTask task{model, data, labels, set_flags(scope, head), head, graph.node(head).kind == NodeKind::ovr};
    std::size_t count = 0;
    for (Parameter* p : task.params) count += p->value.size();
    StageReport report{head, count, {}};
    if (count > 0) {
      Hyperparams hp = config.hp;
      hp.seed = derive_seed(config.hp.seed, {0x57a9e, model.stages_.size()});
      report.history = train(task, train_idx, val_idx, hp);
    }
    for (const std::string& id : scope) model.state_.at(id).trained = true;
    model.stages_.push_back(std::move(report));
  };

  for (const FusionNode& n : graph.nodes)
    if (n.kind == NodeKind::pretrained) run_stage(n.id);
  if (graph.root().kind != NodeKind::pretrained) run_stage(graph.root().id);

  // Final flags: frozen stages and fixed ensembles stay untrainable.
  for (const FusionNode& n : graph.nodes) {
    const bool frozen = (n.kind == NodeKind::pretrained || n.kind == NodeKind::ovr) && n.mode == WeightMode::fixed;
    for (Parameter* p : model.parameters_of(n.id)) p->trainable = !frozen;
  }
  return model;
}

std::vector<double> predict_fusion(const FusionModel& model, const std::map<FeatureName, FeatureVector>& features) {
  FusionInputs inputs;
  for (FeatureName f : model.topology().features()) {
    const auto it = features.find(f);
    if (it == features.end()) throw Error("fusion input is missing feature " + to_string(f));
    if (it->second.name != f) throw ShapeError("feature slot " + to_string(f) + " holds a " + to_string(it->second.name));
    inputs.features[f] = Tensor::row_vector(it->second.values);
  }
  return model.predict_rows(inputs).data;
}

ModelArchive FusionModel::to_archive() const {
  ModelArchive a;
  a.kind = "fusion";
  nlohmann::json comps = nlohmann::json::object();
  for (const auto& [f, c] : components_) {
    const ModelArchive ca = c.to_archive();
    comps[to_string(f)] = {{"kind", ca.kind}, {"meta", ca.meta}};
    for (const auto& [name, value] : ca.arrays()) a.add("component/" + to_string(f) + "/" + name, value);
  }
  nlohmann::json stages = nlohmann::json::array();
  for (const StageReport& s : stages_) {
    stages.push_back({{"node", s.node},
                      {"trainable_parameters", s.trainable_parameters},
                      {"best_epoch", s.history.best_epoch},
                      {"train_loss", s.history.train_loss},
                      {"val_accuracy", s.history.val_accuracy}});
  }
  a.meta = {{"topology", topology_.to_dsl()},
            {"families", families_},
            {"hp", config_.hp.to_json()},
            {"components", comps},
            {"stages", stages}};
  for (const FusionNode& n : topology_.nodes)
    for (const Parameter* p : node_parameters(n.id)) a.add(*p);
  return a;
}

FusionModel FusionModel::from_archive(const ModelArchive& a) {
  if (a.kind != "fusion") throw Error("expected a fusion archive, got '" + a.kind + "'");
  std::map<FeatureName, ComponentModel> comps;
  for (const auto& [name, info] : a.meta.at("components").items()) {
    ModelArchive ca;
    ca.kind = info.at("kind").get<std::string>();
    ca.meta = info.at("meta");
    const std::string prefix = "component/" + name + "/";
    for (const auto& [array, value] : a.arrays())
      if (array.rfind(prefix, 0) == 0) ca.add(array.substr(prefix.size()), value);
    comps.emplace(feature_from_string(name), ComponentModel::from_archive(ca));
  }
  FusionConfig config;
  config.hp = Hyperparams::from_json(a.meta.at("hp"));
  FusionModel m(FusionTopology::parse(a.meta.at("topology").get<std::string>()), a.meta.at("families").get<std::size_t>(),
                std::move(comps), config);
  for (const FusionNode& n : m.topology_.nodes)
    for (Parameter* p : m.parameters_of(n.id)) a.load_into(*p);
  for (const auto& s : a.meta.at("stages")) {
    StageReport r;
    r.node = s.at("node").get<std::string>();
    r.trainable_parameters = s.at("trainable_parameters").get<std::size_t>();
    r.history.best_epoch = s.at("best_epoch").get<std::size_t>();
    r.history.train_loss = s.at("train_loss").get<std::vector<double>>();
    r.history.val_accuracy = s.at("val_accuracy").get<std::vector<double>>();
    m.stages_.push_back(std::move(r));
  }
  for (auto& [id, s] : m.state_) s.trained = true;
  return m;
}

}  // namespace malfuse
