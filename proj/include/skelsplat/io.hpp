#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/gaussian.hpp"
#include "skelsplat/neural_field.hpp"
#include "skelsplat/rigging.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace skelsplat {

/// Malformed or inconsistent file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- binary container ---------------------------------------------------------------------
//
// magic (8 bytes) | u64 header length | UTF-8 JSON header | array payload
//
// The header's "arrays" list gives name, dtype ("f32" / "u32" / "i32"), shape and byte
// offset into the payload for every array. Everything is little-endian.

class BlobWriter {
 public:
  void add_f32(const std::string& name, std::vector<std::size_t> shape, const double* data);
  void add_u32(const std::string& name, std::vector<std::size_t> shape, const std::uint32_t* data);
  void add_i32(const std::string& name, std::vector<std::size_t> shape, const std::int32_t* data);

  template <typename Derived>
  void add_f32(const std::string& name, const Eigen::DenseBase<Derived>& m) {
    const auto& d = m.derived();
    static_assert(Derived::IsVectorAtCompileTime || Derived::IsRowMajor, "row-major storage expected");
    if constexpr (Derived::IsVectorAtCompileTime) {
      add_f32(name, {static_cast<std::size_t>(d.size())}, d.data());
    } else {
      add_f32(name, {static_cast<std::size_t>(d.rows()), static_cast<std::size_t>(d.cols())}, d.data());
    }
  }

  std::vector<std::uint8_t> finish(const char magic[8], nlohmann::json header) const;

 private:
  nlohmann::json arrays_ = nlohmann::json::array();
  std::vector<std::uint8_t> payload_;
};

class BlobReader {
 public:
  BlobReader(std::vector<std::uint8_t> bytes, const char magic[8], const std::string& what);

  const nlohmann::json& header() const { return header_; }
  bool has(const std::string& name) const;
  std::vector<std::size_t> shape(const std::string& name) const;
  std::vector<double> f32(const std::string& name, const std::vector<std::size_t>& expected_shape) const;
  std::vector<std::uint32_t> u32(const std::string& name, const std::vector<std::size_t>& expected_shape) const;
  std::vector<std::int32_t> i32(const std::string& name, const std::vector<std::size_t>& expected_shape) const;

 private:
  const nlohmann::json& entry(const std::string& name, const char* dtype,
                              const std::vector<std::size_t>& expected_shape) const;
  const std::uint8_t* payload(const nlohmann::json& e, std::size_t elems) const;

  std::vector<std::uint8_t> bytes_;
  nlohmann::json header_;
  std::size_t payload_start_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames, so readers never see partial files.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

// ---- template (.abt) ----------------------------------------------------------------------

std::vector<std::uint8_t> encode_template(const BodyTemplate& tmpl);
BodyTemplate decode_template(const std::vector<std::uint8_t>& bytes);
void save_template(const std::filesystem::path& path, const BodyTemplate& tmpl);
BodyTemplate load_template(const std::filesystem::path& path);

// ---- field checkpoint (.nfck) ---------------------------------------------------------------

std::vector<std::uint8_t> encode_field(const RadianceField& field);
RadianceField decode_field(const std::vector<std::uint8_t>& bytes);
void save_field(const std::filesystem::path& path, const RadianceField& field);
RadianceField load_field(const std::filesystem::path& path);

// ---- avatar (.hga) ---------------------------------------------------------------------------

struct AvatarFile {
  HybridAvatar avatar;
  std::optional<DeformNet> deform;
  std::string created;  // UTC, "YYYY-MM-DDTHH:MM:SSZ"
};

/// Current UTC time in the fixed-width header format.
std::string utc_timestamp();

std::vector<std::uint8_t> encode_avatar(const HybridAvatar& avatar, const DeformNet* deform, const std::string& created);
AvatarFile decode_avatar(const std::vector<std::uint8_t>& bytes);
void save_avatar(const std::filesystem::path& path, const HybridAvatar& avatar, const DeformNet* deform,
                 const std::string& created = utc_timestamp());
AvatarFile load_avatar(const std::filesystem::path& path);

/// Avatar file bytes with the creation timestamp blanked, for content comparison.
std::vector<std::uint8_t> avatar_content_bytes(std::vector<std::uint8_t> bytes);

// ---- poses and motions (JSON) --------------------------------------------------------------
//
// Pose: {"global_rotation": [ax, ay, az], "global_translation": [x, y, z],
//        "joints": {"<joint name>": [ax, ay, az], ...}, "shape": [...], "expression": [...]}
// Rotations are axis-angle vectors in radians. Every key is optional; missing keys keep
// the base pose's values.

nlohmann::json pose_to_json(const BodyTemplate& tmpl, const Pose& pose);
/// Applies the keys present in j on top of base. Throws FormatError on bad keys or shapes.
Pose pose_from_json(const BodyTemplate& tmpl, const nlohmann::json& j, const Pose& base);

struct MotionFrame {
  double time = 0.0;
  Pose pose;
};
/// Motion: JSON array of {"time": seconds, "pose": Pose}; times strictly increasing.
std::vector<MotionFrame> motion_from_json(const BodyTemplate& tmpl, const nlohmann::json& j);
nlohmann::json motion_to_json(const BodyTemplate& tmpl, const std::vector<MotionFrame>& motion);
std::vector<MotionFrame> load_motion(const BodyTemplate& tmpl, const std::filesystem::path& path);

/// Procedural motions shipped with the engine: "wave" and "walk".
std::vector<MotionFrame> builtin_motion(const BodyTemplate& tmpl, const std::string& name, int frames = 24,
                                        double fps = 12.0);

}  // namespace skelsplat
