#include "skelsplat/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace skelsplat {

using nlohmann::json;

// ---- TOML subset --------------------------------------------------------------------------------

namespace {

class TomlParser {
 public:
  explicit TomlParser(const std::string& text) : s_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_blank_lines();
      if (at_end()) break;
      if (peek() == '[') {
        ++pos_;
        std::vector<std::string> path = dotted_key(']');
        expect(']');
        end_of_line();
        table = &root;
        for (const std::string& part : path) {
          json& next = (*table)[part];
          if (next.is_null()) next = json::object();
          if (!next.is_object()) fail("'" + part + "' is both a value and a table");
          table = &next;
        }
        continue;
      }
      std::vector<std::string> path = dotted_key('=');
      expect('=');
      skip_space();
      json value = parse_value();
      end_of_line();
      json* dest = table;
      for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        json& next = (*dest)[path[k]];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) fail("'" + path[k] + "' is both a value and a table");
        dest = &next;
      }
      if (dest->contains(path.back())) fail("duplicate key '" + path.back() + "'");
      (*dest)[path.back()] = std::move(value);
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + msg);
  }
  bool at_end() const { return pos_ >= s_.size(); }
  char peek() const { return at_end() ? '\0' : s_[pos_]; }
  void expect(char c) {
    skip_space();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  void skip_space() {
    while (!at_end() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (peek() == '#') {
      while (!at_end() && peek() != '\n') ++pos_;
    }
  }
  // whitespace, comments and newlines, also inside arrays
  void skip_all() {
    while (true) {
      skip_space();
      skip_comment();
      if (peek() == '\r' || peek() == '\n') {
        if (peek() == '\n') ++line_;
        ++pos_;
        continue;
      }
      break;
    }
  }
  void skip_blank_lines() { skip_all(); }
  void end_of_line() {
    skip_space();
    skip_comment();
    if (peek() == '\r') ++pos_;
    if (at_end()) return;
    if (peek() != '\n') fail("unexpected trailing characters");
    ++pos_;
    ++line_;
  }

  std::vector<std::string> dotted_key(char terminator) {
    std::vector<std::string> parts;
    while (true) {
      skip_space();
      std::string part;
      if (peek() == '"') {
        part = parse_string();
      } else {
        while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) {
          part += s_[pos_++];
        }
      }
      if (part.empty()) fail("expected a key");
      parts.push_back(part);
      skip_space();
      if (peek() == '.') {
        ++pos_;
        continue;
      }
      if (peek() != terminator) fail(std::string("expected '") + terminator + "' after key");
      return parts;
    }
  }

  std::string parse_string() {
    ++pos_;  // opening quote
    std::string out;
    while (true) {
      if (at_end() || peek() == '\n') fail("unterminated string");
      char c = s_[pos_++];
      if (c == '"') return out;
      if (c == '\\') {
        if (at_end()) fail("unterminated string");
        const char e = s_[pos_++];
        switch (e) {
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
        continue;
      }
      out += c;
    }
  }

  json parse_value() {
    const char c = peek();
    if (c == '"') return parse_string();
    if (c == '[') {
      ++pos_;
      json arr = json::array();
      while (true) {
        skip_all();
        if (peek() == ']') {
          ++pos_;
          return arr;
        }
        json v = parse_value();
        if (v.is_array()) fail("nested arrays are not supported");
        arr.push_back(std::move(v));
        skip_all();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        if (peek() != ']') fail("expected ',' or ']' in array");
      }
    }
    std::string tok;
    while (!at_end() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' && peek() != ']' &&
           peek() != '#') {
      tok += s_[pos_++];
    }
    if (tok == "true") return true;
    if (tok == "false") return false;
    if (tok.empty()) fail("missing value");
    std::string digits;
    for (char d : tok) {
      if (d != '_') digits += d;
    }
    const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
    try {
      std::size_t used = 0;
      if (!is_float) {
        const long long v = std::stoll(digits, &used);
        if (used == digits.size()) return v;
      } else {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + tok + "'");
  }

  const std::string& s_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

}  // namespace

json parse_toml(const std::string& text) { return TomlParser(text).parse(); }

// ---- key bindings -------------------------------------------------------------------------------------

namespace {

template <typename T>
T convert(const json& v, const std::string& key);

template <>
double convert<double>(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + " must be a number");
  return v.get<double>();
}
template <>
int convert<int>(const json& v, const std::string& key) {
  if (!v.is_number_integer()) throw ConfigError(key + " must be an integer");
  const long long x = v.get<long long>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) throw ConfigError(key + " out of range");
  return static_cast<int>(x);
}
template <>
std::uint64_t convert<std::uint64_t>(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}
template <>
bool convert<bool>(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + " must be true or false");
  return v.get<bool>();
}
template <>
std::string convert<std::string>(const json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + " must be a string");
  return v.get<std::string>();
}
template <>
Range convert<Range>(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw ConfigError(key + " must be a two-number array [lo, hi]");
  }
  return {v[0].get<double>(), v[1].get<double>()};
}
template <>
Vec3 convert<Vec3>(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != 3) throw ConfigError(key + " must be a three-number array");
  Vec3 out;
  for (int k = 0; k < 3; ++k) out[k] = convert<double>(v[k], key);
  return out;
}
template <>
std::vector<int> convert<std::vector<int>>(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key + " must be an array of integers");
  std::vector<int> out;
  for (const json& x : v) out.push_back(convert<int>(x, key));
  return out;
}
template <>
std::vector<std::string> convert<std::vector<std::string>>(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError(key + " must be an array of strings");
  std::vector<std::string> out;
  for (const json& x : v) out.push_back(convert<std::string>(x, key));
  return out;
}

json to_value(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
template <typename T>
json to_value(const T& v) {
  return v;
}

struct Binding {
  ConfigKey info;
  std::function<void(TrainConfig&, const json&)> set;
  std::function<json(const TrainConfig&)> get;
};

template <typename T>
Binding bind(std::string key, std::string doc, T& (*field)(TrainConfig&)) {
  Binding b;
  b.info = {key, std::move(doc)};
  b.set = [field, key](TrainConfig& c, const json& v) { field(c) = convert<T>(v, key); };
  b.get = [field](const TrainConfig& c) {
    TrainConfig copy = c;
    return to_value(field(copy));
  };
  return b;
}

#define SKS_BIND(key, member, doc) \
  bind<std::remove_reference_t<decltype(std::declval<TrainConfig&>().member)>>( \
      key, doc, [](TrainConfig& c) -> auto& { return c.member; })

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      SKS_BIND("seed", seed, "master seed; every stream is derived from it"),

      SKS_BIND("guidance.kind", guidance.kind, "\"oracle\" (analytic mannequin target) or \"external\" (socket)"),
      SKS_BIND("guidance.cfg_scale", guidance.cfg_scale, "classifier-free guidance scale"),
      SKS_BIND("guidance.socket", guidance.socket, "Unix socket path of an external denoiser"),
      SKS_BIND("guidance.texture_seed", guidance.texture_seed, "oracle mannequin texture seed"),
      SKS_BIND("guidance.supersample", guidance.supersample, "oracle target supersampling factor"),

      Binding{{"sds.t_range", "timestep range as fractions of T"},
              [](TrainConfig& c, const json& v) {
                const Range r = convert<Range>(v, "sds.t_range");
                c.sds.t_min_fraction = r[0];
                c.sds.t_max_fraction = r[1];
              },
              [](const TrainConfig& c) { return json::array({c.sds.t_min_fraction, c.sds.t_max_fraction}); }},
      SKS_BIND("sds.weight", sds.weight, "constant w(t)"),
      SKS_BIND("sds.chain_xt", sds.chain_xt, "multiply the residual by sqrt(alpha_bar_t)"),

      SKS_BIND("camera.radius", camera.radius, "camera distance range"),
      SKS_BIND("camera.azimuth", camera.azimuth_deg, "azimuth range, degrees"),
      SKS_BIND("camera.polar", camera.polar_deg, "polar angle range from +y, degrees (90 is level)"),
      SKS_BIND("camera.fov", camera.fov_deg, "vertical field of view range, degrees"),
      SKS_BIND("camera.face_focus_prob", camera.face_focus_prob, "probability of aiming at the face centroid"),
      SKS_BIND("camera.face_radius", camera.face_radius, "distance range under face focus"),
      SKS_BIND("camera.jitter", camera.jitter, "look-at jitter amplitude on x and z"),

      SKS_BIND("pose.canonical_fraction", stage2.poses.canonical_fraction, "share of Stage II steps on named poses"),
      SKS_BIND("pose.canonical_poses", stage2.poses.canonical_poses, "named poses cycled in the canonical phase"),
      SKS_BIND("pose.spine_sigma", stage2.poses.spine_sigma, "random-pose std for spine and neck joints, radians"),
      SKS_BIND("pose.arm_sigma", stage2.poses.arm_sigma, "random-pose std for arm joints, radians"),
      SKS_BIND("pose.leg_sigma", stage2.poses.leg_sigma, "random-pose std for leg joints, radians"),
      SKS_BIND("pose.spine_limit", stage2.poses.spine_limit, "axis-angle norm limit for spine joints"),
      SKS_BIND("pose.arm_limit", stage2.poses.arm_limit, "axis-angle norm limit for arm joints"),
      SKS_BIND("pose.leg_limit", stage2.poses.leg_limit, "axis-angle norm limit for leg joints"),
      SKS_BIND("pose.expression_sigma", stage2.poses.expression_sigma, "std of sampled expression coefficients"),

      SKS_BIND("field.bands", stage1.field.bands, "positional-encoding frequency bands"),
      SKS_BIND("field.hidden", stage1.field.hidden, "hidden layer widths"),
      SKS_BIND("field.density_bias", stage1.field.density_bias, "initial pre-softplus density"),

      SKS_BIND("pretrain.steps", stage1.pretrain.steps, "silhouette/depth fitting steps"),
      SKS_BIND("pretrain.resolution", stage1.pretrain.resolution, "render resolution"),
      SKS_BIND("pretrain.coarse_resolution", stage1.pretrain.coarse_resolution, "resolution of the coarse phase"),
      SKS_BIND("pretrain.coarse_fraction", stage1.pretrain.coarse_fraction, "share of steps at coarse resolution"),
      SKS_BIND("pretrain.lr", stage1.pretrain.lr, "initial learning rate"),
      SKS_BIND("pretrain.lr_final", stage1.pretrain.lr_final, "learning rate at the last step (exponential decay)"),
      SKS_BIND("pretrain.depth_weight", stage1.pretrain.depth_weight, "weight of the depth term"),
      SKS_BIND("pretrain.samples", stage1.pretrain.render.num_samples, "samples per ray"),
      SKS_BIND("pretrain.jitter", stage1.pretrain.render.jitter, "stratified sample offsets"),
      SKS_BIND("pretrain.min_transmittance", stage1.pretrain.render.min_transmittance, "early ray termination"),

      SKS_BIND("stage1.steps", stage1.steps, "Stage I SDS steps"),
      SKS_BIND("stage1.res_start", stage1.res_start, "first progressive resolution (power of two)"),
      SKS_BIND("stage1.res_end", stage1.res_end, "last progressive resolution (power of two)"),
      SKS_BIND("stage1.lambda_geo", stage1.lambda_geo, "geometry loss weight"),
      SKS_BIND("stage1.geo_samples", stage1.geo_samples, "on-mesh (and as many off-mesh) samples per step"),
      SKS_BIND("stage1.lr", stage1.lr, "initial field learning rate"),
      SKS_BIND("stage1.lr_final", stage1.lr_final, "field learning rate at the last step"),
      SKS_BIND("stage1.samples", stage1.num_samples, "samples per ray"),
      SKS_BIND("stage1.jitter", stage1.jitter, "stratified sample offsets"),
      SKS_BIND("stage1.min_transmittance", stage1.min_transmittance, "early ray termination"),

      SKS_BIND("geometry.tau_max", stage1.geometry.tau_max, "density floor demanded on the mesh"),
      SKS_BIND("geometry.tau_min", stage1.geometry.tau_min, "density ceiling demanded off the mesh"),
      SKS_BIND("geometry.band_fraction", stage1.geometry.band_fraction, "off-mesh offset, fraction of the bounds diagonal"),
      SKS_BIND("geometry.parts", stage1.geometry.parts, "template parts constrained by the geometry loss"),

      SKS_BIND("init.grid", init.grid, "density grid resolution for point extraction"),
      SKS_BIND("init.pad", init.pad, "grid padding, fraction of the template extent"),
      SKS_BIND("init.threshold", init.threshold, "density threshold"),
      SKS_BIND("init.per_triangle", init.per_triangle, "mesh-binding Gaussians per triangle (1 or 3)"),
      SKS_BIND("init.bound_parts", init.bound_parts, "template parts represented by mesh-binding Gaussians"),
      SKS_BIND("init.knn_k", init.smoothing.k_neighbors, "neighbors in skinning-weight smoothing"),
      SKS_BIND("init.knn_iterations", init.smoothing.iterations, "smoothing iterations"),
      SKS_BIND("init.knn_epsilon", init.smoothing.distance_epsilon, "floor on squared distances"),

      SKS_BIND("stage2.steps", stage2.steps, "Stage II SDS steps"),
      SKS_BIND("stage2.resolution", stage2.resolution, "render resolution (power of two)"),
      SKS_BIND("stage2.lr_position", stage2.lr_position, "Gaussian position learning rate"),
      SKS_BIND("stage2.lr_rotation", stage2.lr_rotation, "Gaussian rotation learning rate"),
      SKS_BIND("stage2.lr_scale", stage2.lr_scale, "Gaussian log-scale learning rate"),
      SKS_BIND("stage2.lr_opacity", stage2.lr_opacity, "Gaussian opacity-logit learning rate"),
      SKS_BIND("stage2.lr_color", stage2.lr_color, "Gaussian color learning rate"),
      SKS_BIND("stage2.lr_deform", stage2.lr_deform, "pose-corrective network learning rate"),
      SKS_BIND("stage2.lr_shape", stage2.lr_shape, "part shape coefficient learning rate"),
      SKS_BIND("stage2.use_deform", stage2.use_deform, "train the pose-corrective network"),

      SKS_BIND("deform.bands", stage2.deform.bands, "positional-encoding bands of the corrective network"),
      SKS_BIND("deform.hidden", stage2.deform.hidden, "hidden layer widths of the corrective network"),
      SKS_BIND("deform.output_scale", stage2.deform.output_scale, "tanh output bound"),

      SKS_BIND("skeleton.line_width", skeleton.line_width, "bone stroke width at the reference size"),
      SKS_BIND("skeleton.radius", skeleton.radius, "keypoint disc radius at the reference size"),
      SKS_BIND("skeleton.reference_size", skeleton.reference_size, "image side the stroke sizes refer to"),
      SKS_BIND("skeleton.cull_hands", cull_hands, "occlusion-cull hand keypoints as well as face keypoints"),

      SKS_BIND("render.tile_size", render.tile_size, "splat renderer tile side in pixels"),
      SKS_BIND("render.min_alpha", render.min_alpha, "per-splat contribution threshold"),
      SKS_BIND("render.min_transmittance", render.min_transmittance, "compositing stops below this transmittance"),
      SKS_BIND("render.dilation", render.dilation, "pixel-space covariance dilation"),
      SKS_BIND("render.background", render.background, "background color"),
      SKS_BIND("render.threads", render.threads, "worker threads (0: OpenMP default)"),

      SKS_BIND("log.every", log_every, "training steps between log records"),
      SKS_BIND("log.checkpoint_every", checkpoint_every, "steps between intermediate checkpoints (0: final only)"),
  };
  return table;
}

#undef SKS_BIND

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, const json*>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else {
      out.emplace_back(key, &*it);
    }
  }
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Binding& b : bindings()) k.push_back(b.info);
    return k;
  }();
  return keys;
}

TrainConfig config_from_toml(const std::string& text, TrainConfig base) {
  const json doc = parse_toml(text);
  std::vector<std::pair<std::string, const json*>> entries;
  flatten(doc, "", entries);
  std::map<std::string, const Binding*> by_key;
  for (const Binding& b : bindings()) by_key[b.info.key] = &b;
  for (const auto& [key, value] : entries) {
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second->set(base, *value);
  }
  try {
    base.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_toml(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json config_to_json(const TrainConfig& cfg) {
  json out = json::object();
  for (const Binding& b : bindings()) {
    std::string pointer = "/" + b.info.key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    out[json::json_pointer(pointer)] = b.get(cfg);
  }
  return out;
}

std::string config_to_toml(const TrainConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const Binding& b : bindings()) {
    const std::string& key = b.info.key;
    const auto dot = key.find('.');
    const std::string table = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (table != section) {
      os << "\n[" << table << "]\n";
      section = table;
    }
    os << "# " << b.info.doc << "\n" << name << " = " << b.get(cfg).dump() << "\n";
  }
  return os.str();
}

}  // namespace skelsplat
