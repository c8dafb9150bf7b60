#include "skelsplat/io.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <limits>

namespace skelsplat {

using nlohmann::json;

namespace {

constexpr char kTemplateMagic[9] = "ABTEMP01";
constexpr char kFieldMagic[9] = "NFCKPT01";
constexpr char kAvatarMagic[9] = "HGAVAT01";

void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

// ---- container ---------------------------------------------------------------------------------

void BlobWriter::add_f32(const std::string& name, std::vector<std::size_t> shape, const double* data) {
  const std::size_t n = product(shape);
  arrays_.push_back({{"name", name}, {"dtype", "f32"}, {"shape", shape}, {"offset", payload_.size()}});
  for (std::size_t i = 0; i < n; ++i) put_le32(payload_, std::bit_cast<std::uint32_t>(static_cast<float>(data[i])));
}

void BlobWriter::add_u32(const std::string& name, std::vector<std::size_t> shape, const std::uint32_t* data) {
  const std::size_t n = product(shape);
  arrays_.push_back({{"name", name}, {"dtype", "u32"}, {"shape", shape}, {"offset", payload_.size()}});
  for (std::size_t i = 0; i < n; ++i) put_le32(payload_, data[i]);
}

void BlobWriter::add_i32(const std::string& name, std::vector<std::size_t> shape, const std::int32_t* data) {
  const std::size_t n = product(shape);
  arrays_.push_back({{"name", name}, {"dtype", "i32"}, {"shape", shape}, {"offset", payload_.size()}});
  for (std::size_t i = 0; i < n; ++i) put_le32(payload_, static_cast<std::uint32_t>(data[i]));
}

std::vector<std::uint8_t> BlobWriter::finish(const char magic[8], json header) const {
  header["arrays"] = arrays_;
  header["payload_bytes"] = payload_.size();
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(magic, magic + 8);
  const std::uint64_t len = text.size();
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload_.begin(), payload_.end());
  return out;
}

BlobReader::BlobReader(std::vector<std::uint8_t> bytes, const char magic[8], const std::string& what)
    : bytes_(std::move(bytes)), what_(what) {
  if (bytes_.size() < 16 || std::memcmp(bytes_.data(), magic, 8) != 0) {
    throw FormatError(what_ + ": bad magic (expected " + std::string(magic, 8) + ")");
  }
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(bytes_[8 + b]) << (8 * b);
  if (len > bytes_.size() - 16) throw FormatError(what_ + ": header length exceeds file size");
  try {
    header_ = json::parse(bytes_.begin() + 16, bytes_.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw FormatError(what_ + ": header is not valid JSON (" + e.what() + ")");
  }
  payload_start_ = 16 + len;
  if (!header_.is_object() || !header_.contains("arrays") || !header_["arrays"].is_array()) {
    throw FormatError(what_ + ": header lacks an array table");
  }
  if (header_.value("payload_bytes", std::size_t{0}) != bytes_.size() - payload_start_) {
    throw FormatError(what_ + ": payload size differs from header");
  }
}

bool BlobReader::has(const std::string& name) const {
  for (const json& e : header_["arrays"]) {
    if (e.value("name", "") == name) return true;
  }
  return false;
}

std::vector<std::size_t> BlobReader::shape(const std::string& name) const {
  for (const json& e : header_["arrays"]) {
    if (e.value("name", "") == name) return e.at("shape").get<std::vector<std::size_t>>();
  }
  throw FormatError(what_ + ": missing array '" + name + "'");
}

const json& BlobReader::entry(const std::string& name, const char* dtype,
                              const std::vector<std::size_t>& expected_shape) const {
  for (const json& e : header_["arrays"]) {
    if (e.value("name", "") != name) continue;
    if (e.value("dtype", "") != dtype) throw FormatError(what_ + ": array '" + name + "' has the wrong dtype");
    if (e.at("shape").get<std::vector<std::size_t>>() != expected_shape) {
      throw FormatError(what_ + ": array '" + name + "' has shape " + e.at("shape").dump());
    }
    return e;
  }
  throw FormatError(what_ + ": missing array '" + name + "'");
}

const std::uint8_t* BlobReader::payload(const json& e, std::size_t elems) const {
  const std::size_t offset = e.at("offset").get<std::size_t>();
  if (offset > bytes_.size() - payload_start_ || elems * 4 > bytes_.size() - payload_start_ - offset) {
    throw FormatError(what_ + ": array '" + e.value("name", "") + "' runs past the end of the file");
  }
  return bytes_.data() + payload_start_ + offset;
}

std::vector<double> BlobReader::f32(const std::string& name, const std::vector<std::size_t>& expected_shape) const {
  const std::size_t n = product(expected_shape);
  const std::uint8_t* p = payload(entry(name, "f32", expected_shape), n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(get_le32(p + 4 * i));
  return out;
}

std::vector<std::uint32_t> BlobReader::u32(const std::string& name, const std::vector<std::size_t>& expected_shape) const {
  const std::size_t n = product(expected_shape);
  const std::uint8_t* p = payload(entry(name, "u32", expected_shape), n);
  std::vector<std::uint32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = get_le32(p + 4 * i);
  return out;
}

std::vector<std::int32_t> BlobReader::i32(const std::string& name, const std::vector<std::size_t>& expected_shape) const {
  const std::size_t n = product(expected_shape);
  const std::uint8_t* p = payload(entry(name, "i32", expected_shape), n);
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::int32_t>(get_le32(p + 4 * i));
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

template <typename M>
M to_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  M m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

VecX to_vector(const std::vector<double>& v) { return Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size())); }

template <typename T>
T header_get(const json& h, const char* key, const std::string& what) {
  try {
    return h.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(what + ": header field '" + key + "' missing or mistyped");
  }
}

}  // namespace

// ---- template ----------------------------------------------------------------------------------

std::vector<std::uint8_t> encode_template(const BodyTemplate& tmpl) {
  tmpl.validate();
  const std::size_t nv = tmpl.num_vertices(), nj = tmpl.num_joints(), nf = tmpl.num_faces();
  BlobWriter w;
  w.add_f32("vertices_rest", tmpl.vertices_rest);
  w.add_f32("shape_basis", {static_cast<std::size_t>(tmpl.shape_basis.rows()), static_cast<std::size_t>(tmpl.shape_basis.cols())},
            tmpl.shape_basis.data());
  w.add_f32("joint_regressor", tmpl.joint_regressor);
  w.add_f32("skin_weights", tmpl.skin_weights);
  std::vector<std::uint32_t> faces(nf * 3);
  for (std::size_t f = 0; f < nf; ++f) {
    for (int k = 0; k < 3; ++k) faces[3 * f + k] = static_cast<std::uint32_t>(tmpl.faces(static_cast<Eigen::Index>(f), k));
  }
  w.add_u32("faces", {nf, 3}, faces.data());
  json parts = json::object();
  for (const auto& [name, tris] : tmpl.part_labels) {
    std::vector<std::uint32_t> t(tris.begin(), tris.end());
    w.add_u32("part:" + name, {t.size()}, t.data());
    parts[name] = t.size();
  }
  json keypoints = json::array();
  for (const Keypoint& kp : tmpl.keypoints) {
    keypoints.push_back({{"source", kp.source == Keypoint::Source::joint ? "joint" : "vertex"},
                         {"index", kp.index},
                         {"name", kp.name},
                         {"facial", kp.facial}});
  }
  json bones = json::array();
  for (const auto& [a, b] : tmpl.bones) bones.push_back({a, b});
  const json header = {{"format", "abt"},
                       {"version", 1},
                       {"num_vertices", nv},
                       {"num_joints", nj},
                       {"num_faces", nf},
                       {"num_shape", tmpl.num_shape},
                       {"num_expression", tmpl.num_expression},
                       {"parents", tmpl.parents},
                       {"joint_names", tmpl.joint_names},
                       {"parts", parts},
                       {"keypoints", keypoints},
                       {"bones", bones}};
  return w.finish(kTemplateMagic, header);
}

BodyTemplate decode_template(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "template";
  const BlobReader r(bytes, kTemplateMagic, what);
  const json& h = r.header();
  BodyTemplate t;
  try {
    const auto nv = header_get<std::size_t>(h, "num_vertices", what);
    const auto nj = header_get<std::size_t>(h, "num_joints", what);
    const auto nf = header_get<std::size_t>(h, "num_faces", what);
    t.num_shape = header_get<int>(h, "num_shape", what);
    t.num_expression = header_get<int>(h, "num_expression", what);
    if (t.num_shape < 0 || t.num_expression < 0) throw FormatError(what + ": negative coefficient count");
    const std::size_t nc = static_cast<std::size_t>(t.num_coefficients());
    t.parents = header_get<std::vector<int>>(h, "parents", what);
    t.joint_names = header_get<std::vector<std::string>>(h, "joint_names", what);
    t.vertices_rest = to_matrix<Points>(r.f32("vertices_rest", {nv, 3}), nv, 3);
    t.shape_basis = to_matrix<MatX>(r.f32("shape_basis", {3 * nv, nc}), 3 * nv, nc);
    t.joint_regressor = to_matrix<MatX>(r.f32("joint_regressor", {nj, nv}), nj, nv);
    t.skin_weights = to_matrix<MatX>(r.f32("skin_weights", {nv, nj}), nv, nj);
    const auto faces = r.u32("faces", {nf, 3});
    t.faces.resize(static_cast<Eigen::Index>(nf), 3);
    for (std::size_t i = 0; i < faces.size(); ++i) t.faces.data()[i] = static_cast<int>(faces[i]);
    for (const auto& [name, count] : h.at("parts").items()) {
      const auto tris = r.u32("part:" + name, {count.get<std::size_t>()});
      t.part_labels[name] = std::vector<int>(tris.begin(), tris.end());
    }
    for (const json& k : h.at("keypoints")) {
      Keypoint kp;
      const std::string src = k.at("source").get<std::string>();
      if (src != "joint" && src != "vertex") throw FormatError(what + ": keypoint source '" + src + "'");
      kp.source = src == "joint" ? Keypoint::Source::joint : Keypoint::Source::vertex;
      kp.index = k.at("index").get<int>();
      kp.name = k.at("name").get<std::string>();
      kp.facial = k.at("facial").get<bool>();
      t.keypoints.push_back(kp);
    }
    for (const json& b : h.at("bones")) t.bones.emplace_back(b.at(0).get<int>(), b.at(1).get<int>());
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed header (" + e.what() + ")");
  }
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  }
  return t;
}

void save_template(const std::filesystem::path& path, const BodyTemplate& tmpl) { write_file(path, encode_template(tmpl)); }
BodyTemplate load_template(const std::filesystem::path& path) { return decode_template(read_file(path)); }

// ---- field ---------------------------------------------------------------------------------------

std::vector<std::uint8_t> encode_field(const RadianceField& field) {
  const FieldConfig& c = field.config();
  BlobWriter w;
  w.add_f32("params", field.params());
  const json header = {{"format", "nfck"},
                       {"version", 1},
                       {"bands", c.bands},
                       {"hidden", c.hidden},
                       {"density_bias", c.density_bias},
                       {"center", {c.center.x(), c.center.y(), c.center.z()}},
                       {"radius", c.radius}};
  return w.finish(kFieldMagic, header);
}

RadianceField decode_field(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "field checkpoint";
  const BlobReader r(bytes, kFieldMagic, what);
  const json& h = r.header();
  FieldConfig c;
  c.bands = header_get<int>(h, "bands", what);
  c.hidden = header_get<std::vector<int>>(h, "hidden", what);
  c.density_bias = header_get<double>(h, "density_bias", what);
  const auto center = header_get<std::vector<double>>(h, "center", what);
  if (center.size() != 3) throw FormatError(what + ": center must have 3 entries");
  c.center = Vec3(center[0], center[1], center[2]);
  c.radius = header_get<double>(h, "radius", what);
  if (c.bands < 0 || c.bands > 16 || c.hidden.empty() || !(c.radius > 0.0)) {
    throw FormatError(what + ": unsupported architecture");
  }
  for (int width : c.hidden) {
    if (width <= 0 || width > 4096) throw FormatError(what + ": unsupported hidden width");
  }
  RadianceField field(c, 0);
  field.params() = to_vector(r.f32("params", {static_cast<std::size_t>(field.num_params())}));
  return field;
}

void save_field(const std::filesystem::path& path, const RadianceField& field) { write_file(path, encode_field(field)); }
RadianceField load_field(const std::filesystem::path& path) { return decode_field(read_file(path)); }

// ---- avatar --------------------------------------------------------------------------------------

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::uint8_t> encode_avatar(const HybridAvatar& avatar, const DeformNet* deform, const std::string& created) {
  if (created.size() != 20) throw std::invalid_argument("timestamp must be YYYY-MM-DDTHH:MM:SSZ");
  const int nj = static_cast<int>(avatar.lbs_weights.cols());
  avatar.validate(nj);
  const std::size_t n = avatar.size();
  BlobWriter w;
  w.add_f32("positions", avatar.gaussians.positions);
  w.add_f32("rotations", avatar.gaussians.rotations);
  w.add_f32("log_scales", avatar.gaussians.log_scales);
  w.add_f32("opacity_logits", avatar.gaussians.opacity_logits);
  w.add_f32("colors", avatar.gaussians.colors);
  w.add_f32("lbs_weights", avatar.lbs_weights);
  w.add_f32("part_shape", avatar.part_shape);

  // binding table: part names are indexed into a header list
  std::vector<std::string> parts;
  std::vector<std::uint32_t> kind(n), part(n), triangle(n);
  std::vector<std::int32_t> anchors(n);
  Points bary = Points::Zero(static_cast<Eigen::Index>(n), 3);
  VecX offset = VecX::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    kind[i] = static_cast<std::uint32_t>(avatar.kind[i]);
    anchors[i] = avatar.anchor_vertices.empty() ? -1 : avatar.anchor_vertices[i];
    part[i] = std::numeric_limits<std::uint32_t>::max();
    triangle[i] = std::numeric_limits<std::uint32_t>::max();
    if (avatar.kind[i] != GaussianKind::mesh_binding) continue;
    const MeshBinding& b = avatar.bindings[i];
    auto it = std::find(parts.begin(), parts.end(), b.part);
    if (it == parts.end()) it = parts.insert(parts.end(), b.part);
    part[i] = static_cast<std::uint32_t>(it - parts.begin());
    triangle[i] = static_cast<std::uint32_t>(b.triangle);
    bary.row(static_cast<Eigen::Index>(i)) = b.barycentric.transpose();
    offset[static_cast<Eigen::Index>(i)] = b.normal_offset;
  }
  w.add_u32("kind", {n}, kind.data());
  w.add_u32("binding_part", {n}, part.data());
  w.add_u32("binding_triangle", {n}, triangle.data());
  w.add_f32("binding_barycentric", bary);
  w.add_f32("binding_normal_offset", offset);
  w.add_i32("anchor_vertices", {n}, anchors.data());

  json deform_header = nullptr;
  if (deform != nullptr) {
    const DeformNetConfig& c = deform->config();
    deform_header = {{"bands", c.bands},
                     {"hidden", c.hidden},
                     {"output_scale", c.output_scale},
                     {"center", {c.center.x(), c.center.y(), c.center.z()}},
                     {"radius", c.radius},
                     {"pose_dim", deform->pose_dim()}};
    w.add_f32("deform_params", deform->params());
  }
  const json header = {{"format", "hga"},
                       {"version", 1},
                       {"created", created},
                       {"num_gaussians", n},
                       {"num_unconstrained", avatar.count(GaussianKind::unconstrained)},
                       {"num_bound", avatar.count(GaussianKind::mesh_binding)},
                       {"num_joints", nj},
                       {"num_coefficients", avatar.part_shape.size()},
                       {"binding_parts", parts},
                       {"template", avatar.template_path},
                       {"field", avatar.field_path},
                       {"deform", deform_header}};
  return w.finish(kAvatarMagic, header);
}

AvatarFile decode_avatar(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "avatar";
  const BlobReader r(bytes, kAvatarMagic, what);
  const json& h = r.header();
  AvatarFile out;
  HybridAvatar& a = out.avatar;
  const auto n = header_get<std::size_t>(h, "num_gaussians", what);
  const auto nj = header_get<std::size_t>(h, "num_joints", what);
  const auto nc = header_get<std::size_t>(h, "num_coefficients", what);
  out.created = header_get<std::string>(h, "created", what);
  a.template_path = header_get<std::string>(h, "template", what);
  a.field_path = header_get<std::string>(h, "field", what);
  const auto parts = header_get<std::vector<std::string>>(h, "binding_parts", what);

  a.gaussians.positions = to_matrix<Points>(r.f32("positions", {n, 3}), n, 3);
  a.gaussians.rotations = to_matrix<Quats>(r.f32("rotations", {n, 4}), n, 4);
  a.gaussians.log_scales = to_matrix<Points>(r.f32("log_scales", {n, 3}), n, 3);
  a.gaussians.opacity_logits = to_vector(r.f32("opacity_logits", {n}));
  a.gaussians.colors = to_matrix<Points>(r.f32("colors", {n, 3}), n, 3);
  a.lbs_weights = to_matrix<MatX>(r.f32("lbs_weights", {n, nj}), n, nj);
  a.part_shape = to_vector(r.f32("part_shape", {nc}));
  const auto kind = r.u32("kind", {n});
  const auto part = r.u32("binding_part", {n});
  const auto triangle = r.u32("binding_triangle", {n});
  const auto bary = r.f32("binding_barycentric", {n, 3});
  const auto offset = r.f32("binding_normal_offset", {n});
  const auto anchors = r.i32("anchor_vertices", {n});
  a.kind.resize(n);
  a.bindings.resize(n);
  a.anchor_vertices.assign(anchors.begin(), anchors.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (kind[i] > 1) throw FormatError(what + ": unknown Gaussian kind " + std::to_string(kind[i]));
    a.kind[i] = static_cast<GaussianKind>(kind[i]);
    if (a.kind[i] != GaussianKind::mesh_binding) continue;
    if (part[i] >= parts.size()) throw FormatError(what + ": binding part index out of range");
    MeshBinding& b = a.bindings[i];
    b.part = parts[part[i]];
    b.triangle = static_cast<int>(triangle[i]);
    b.barycentric = Vec3(bary[3 * i], bary[3 * i + 1], bary[3 * i + 2]);
    b.normal_offset = offset[i];
  }
  if (h.contains("deform") && !h["deform"].is_null()) {
    const json& d = h["deform"];
    DeformNetConfig c;
    try {
      c.bands = d.at("bands").get<int>();
      c.hidden = d.at("hidden").get<std::vector<int>>();
      c.output_scale = d.at("output_scale").get<double>();
      const auto center = d.at("center").get<std::vector<double>>();
      if (center.size() != 3) throw FormatError(what + ": deform center must have 3 entries");
      c.center = Vec3(center[0], center[1], center[2]);
      c.radius = d.at("radius").get<double>();
    } catch (const json::exception& e) {
      throw FormatError(what + ": malformed deform header (" + e.what() + ")");
    }
    const int pose_dim = d.value("pose_dim", 0);
    if (pose_dim <= 0 || c.bands < 0 || c.bands > 16 || c.hidden.empty()) throw FormatError(what + ": unsupported deform network");
    DeformNet net(c, pose_dim, 0);
    net.params() = to_vector(r.f32("deform_params", {static_cast<std::size_t>(net.num_params())}));
    out.deform = std::move(net);
  }
  try {
    a.validate(static_cast<int>(nj));
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  }
  return out;
}

void save_avatar(const std::filesystem::path& path, const HybridAvatar& avatar, const DeformNet* deform,
                 const std::string& created) {
  write_file(path, encode_avatar(avatar, deform, created));
}

AvatarFile load_avatar(const std::filesystem::path& path) { return decode_avatar(read_file(path)); }

std::vector<std::uint8_t> avatar_content_bytes(std::vector<std::uint8_t> bytes) {
  static const std::string key = "\"created\":\"";
  const auto it = std::search(bytes.begin(), bytes.end(), key.begin(), key.end());
  if (it == bytes.end()) throw FormatError("avatar: no creation timestamp");
  std::fill_n(it + static_cast<std::ptrdiff_t>(key.size()), 20, std::uint8_t{'0'});
  return bytes;
}

// ---- poses and motions ---------------------------------------------------------------------------

namespace {

Vec3 vec3_of(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw FormatError(what + " must be an array of 3 numbers");
  Vec3 v;
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw FormatError(what + " must be an array of 3 numbers");
    v[k] = j[k].get<double>();
    if (!std::isfinite(v[k])) throw FormatError(what + " must be finite");
  }
  return v;
}

VecX coefficients_of(const json& j, int limit, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + " must be an array of numbers");
  if (static_cast<int>(j.size()) > limit) {
    throw FormatError(what + " has " + std::to_string(j.size()) + " entries, template supports " + std::to_string(limit));
  }
  VecX v = VecX::Zero(limit);
  for (std::size_t k = 0; k < j.size(); ++k) {
    if (!j[k].is_number()) throw FormatError(what + " must be an array of numbers");
    v[static_cast<Eigen::Index>(k)] = j[k].get<double>();
    if (!std::isfinite(v[static_cast<Eigen::Index>(k)])) throw FormatError(what + " must be finite");
  }
  return v;
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 axis_angle(const Quat& q) {
  const Eigen::AngleAxisd aa(q.normalized());
  return aa.angle() * aa.axis();
}

}  // namespace

json pose_to_json(const BodyTemplate& tmpl, const Pose& pose) {
  json joints = json::object();
  for (int j = 0; j < tmpl.num_joints(); ++j) joints[tmpl.joint_names[j]] = vec_json(axis_angle(pose.joint_rotations.at(j)));
  json out = {{"global_rotation", vec_json(axis_angle(pose.global_rotation))},
              {"global_translation", vec_json(pose.global_translation)},
              {"joints", joints}};
  out["shape"] = std::vector<double>(pose.shape.data(), pose.shape.data() + pose.shape.size());
  out["expression"] = std::vector<double>(pose.expression.data(), pose.expression.data() + pose.expression.size());
  return out;
}

Pose pose_from_json(const BodyTemplate& tmpl, const json& j, const Pose& base) {
  if (!j.is_object()) throw FormatError("pose must be a JSON object");
  Pose pose = base;
  for (const auto& [key, value] : j.items()) {
    if (key == "global_rotation") {
      pose.global_rotation = to_quat(quat_exp(vec3_of(value, "global_rotation")));
    } else if (key == "global_translation") {
      pose.global_translation = vec3_of(value, "global_translation");
    } else if (key == "joints") {
      if (!value.is_object()) throw FormatError("joints must map joint names to axis-angle vectors");
      for (const auto& [name, aa] : value.items()) {
        const int idx = tmpl.joint_index(name);
        if (idx < 0) throw FormatError("unknown joint '" + name + "'");
        pose.joint_rotations.at(idx) = to_quat(quat_exp(vec3_of(aa, "joint '" + name + "'")));
      }
    } else if (key == "shape") {
      pose.shape = coefficients_of(value, tmpl.num_shape, "shape");
    } else if (key == "expression") {
      pose.expression = coefficients_of(value, tmpl.num_expression, "expression");
    } else {
      throw FormatError("unknown pose key '" + key + "'");
    }
  }
  return pose;
}

std::vector<MotionFrame> motion_from_json(const BodyTemplate& tmpl, const json& j) {
  if (!j.is_array() || j.empty()) throw FormatError("motion must be a non-empty JSON array");
  std::vector<MotionFrame> out;
  for (const json& f : j) {
    if (!f.is_object() || !f.contains("time") || !f["time"].is_number() || !f.contains("pose")) {
      throw FormatError("motion frame needs numeric 'time' and 'pose'");
    }
    MotionFrame frame;
    frame.time = f["time"].get<double>();
    if (!out.empty() && !(frame.time > out.back().time)) throw FormatError("motion times must increase");
    frame.pose = pose_from_json(tmpl, f["pose"], Pose::identity(tmpl));
    out.push_back(std::move(frame));
  }
  return out;
}

json motion_to_json(const BodyTemplate& tmpl, const std::vector<MotionFrame>& motion) {
  json out = json::array();
  for (const MotionFrame& f : motion) out.push_back({{"time", f.time}, {"pose", pose_to_json(tmpl, f.pose)}});
  return out;
}

std::vector<MotionFrame> load_motion(const BodyTemplate& tmpl, const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return motion_from_json(tmpl, j);
}

std::vector<MotionFrame> builtin_motion(const BodyTemplate& tmpl, const std::string& name, int frames, double fps) {
  if (frames < 1 || !(fps > 0.0)) throw std::invalid_argument("motion needs at least one frame and positive fps");
  auto joint = [&](const char* n) {
    const int idx = tmpl.joint_index(n);
    if (idx < 0) throw std::invalid_argument(std::string("template lacks joint ") + n);
    return idx;
  };
  std::vector<MotionFrame> out;
  for (int f = 0; f < frames; ++f) {
    const double phase = 2.0 * kPi * f / frames;
    Pose p = Pose::identity(tmpl);
    if (name == "wave") {
      // right arm raised sideways, forearm swinging
      p.joint_rotations[joint("r_shoulder")] = to_quat(quat_exp(Vec3(0, 0, -1.2)));
      p.joint_rotations[joint("r_elbow")] = to_quat(quat_exp(Vec3(0, 0, -0.6 - 0.5 * std::sin(phase))));
    } else if (name == "walk") {
      const double swing = 0.45 * std::sin(phase);
      p.joint_rotations[joint("l_hip")] = to_quat(quat_exp(Vec3(swing, 0, 0)));
      p.joint_rotations[joint("r_hip")] = to_quat(quat_exp(Vec3(-swing, 0, 0)));
      p.joint_rotations[joint("l_knee")] = to_quat(quat_exp(Vec3(std::max(0.0, 0.6 * std::sin(phase + 1.2)), 0, 0)));
      p.joint_rotations[joint("r_knee")] = to_quat(quat_exp(Vec3(std::max(0.0, -0.6 * std::sin(phase + 1.2)), 0, 0)));
      p.joint_rotations[joint("l_shoulder")] = to_quat(quat_exp(Vec3(-0.6 * swing, 0, 0)));
      p.joint_rotations[joint("r_shoulder")] = to_quat(quat_exp(Vec3(0.6 * swing, 0, 0)));
    } else {
      throw std::invalid_argument("unknown motion '" + name + "' (expected wave or walk)");
    }
    out.push_back({f / fps, p});
  }
  return out;
}

}  // namespace skelsplat
