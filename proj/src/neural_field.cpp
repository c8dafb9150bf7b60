#include "skelsplat/neural_field.hpp"

#include "skelsplat/mesh_raster.hpp"

#include <omp.h>

#include <algorithm>
#include <stdexcept>

namespace skelsplat {

namespace {

constexpr int kQueryChunk = 1024;

int resolve_threads(int threads) { return threads > 0 ? threads : omp_get_max_threads(); }

Points rows_of(const Points& pts, int begin, int end) { return pts.middleRows(begin, end - begin); }

}  // namespace

// ---- field -------------------------------------------------------------------------

RadianceField::RadianceField(const FieldConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  enc_.bands = cfg.bands;
  enc_.center = cfg.center;
  enc_.radius = cfg.radius;
  mlp_ = Mlp(enc_.dim(), cfg.hidden, 4);
  Rng rng(seed);
  mlp_.init(rng, 1.0);
  // output bias: density first, then color (0 maps to 0.5)
  mlp_.params[mlp_.num_params() - 4] = cfg.density_bias;
}

void RadianceField::zero_output_weights() {
  const auto& sizes = mlp_.sizes();
  const int in = sizes[sizes.size() - 2];
  const int start = mlp_.num_params() - 4 - 4 * in;
  mlp_.params.segment(start, 4 * in).setZero();
}

void RadianceField::query(const Points& points, VecX& density, Points& color) const {
  const int m = static_cast<int>(points.rows());
  density.resize(m);
  color.resize(m, 3);
  for_each_chunk(m, kQueryChunk, kGradientLanes, 0, [&](int begin, int end, int) {
    const Block out = mlp_.forward(enc_.encode(rows_of(points, begin, end)));
    for (int i = begin; i < end; ++i) {
      const int k = i - begin;
      density[i] = softplus(out(0, k));
      for (int c = 0; c < 3; ++c) color(i, c) = sigmoid(out(1 + c, k));
    }
  });
}

void RadianceField::backward(const Points& points, const VecX& d_density, const Points& d_color,
                             VecX& d_params, int threads) const {
  const int m = static_cast<int>(points.rows());
  if (d_params.size() != num_params()) d_params = VecX::Zero(num_params());
  std::vector<VecX> lanes(kGradientLanes, VecX::Zero(num_params()));
  for_each_chunk(m, kQueryChunk, kGradientLanes, resolve_threads(threads), [&](int begin, int end, int lane) {
    std::vector<Block> cache;
    const Block out = mlp_.forward(enc_.encode(rows_of(points, begin, end)), &cache);
    Block d_out(4, end - begin);
    for (int i = begin; i < end; ++i) {
      const int k = i - begin;
      d_out(0, k) = d_density[i] * sigmoid(out(0, k));
      for (int c = 0; c < 3; ++c) {
        const double s = sigmoid(out(1 + c, k));
        d_out(1 + c, k) = d_color(i, c) * s * (1.0 - s);
      }
    }
    mlp_.backward(cache, d_out, lanes[lane]);
  });
  for (const VecX& g : lanes) d_params += g;
}

FieldConfig field_config_for(const BodyTemplate& tmpl, FieldConfig base) {
  const auto [lo, hi] = tmpl.bounds();
  base.center = 0.5 * (lo + hi);
  base.radius = 0.6 * (hi - lo).maxCoeff();
  return base;
}

std::pair<Vec3, Vec3> padded_bounds(const Points& vertices, double pad_fraction) {
  const Vec3 lo = vertices.colwise().minCoeff().transpose();
  const Vec3 hi = vertices.colwise().maxCoeff().transpose();
  const Vec3 pad = pad_fraction * (hi - lo);
  return {lo - pad, hi + pad};
}

// ---- volume rendering ----------------------------------------------------------------

namespace {

struct RaySamples {
  Points points;                  // all samples, ray after ray
  std::vector<double> z;          // camera-space depth per sample
  std::vector<double> delta;      // segment length per sample
  std::vector<int> offset;        // per pixel start into the sample arrays; size P + 1
};

bool clip_ray(const Vec3& o, const Vec3& d, const std::pair<Vec3, Vec3>& box, double& t0, double& t1) {
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < box.first[a] || o[a] > box.second[a]) return false;
      continue;
    }
    double ta = (box.first[a] - o[a]) / d[a];
    double tb = (box.second[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t0 < t1;
}

RaySamples build_samples(const Camera& cam, const VolumeRenderConfig& cfg) {
  if (cfg.num_samples <= 0) throw std::invalid_argument("volume render needs at least one sample");
  const int w = cam.width, h = cam.height, n = cfg.num_samples;
  const int pixels = w * h;
  const Vec3 origin = cam.center();
  const Vec3 forward = cam.world_to_camera.rotation.row(2).transpose();
  std::vector<double> t_start(pixels, 0.0), t_end(pixels, 0.0);
  std::vector<Vec3> dirs(pixels);
  RaySamples rs;
  rs.offset.assign(pixels + 1, 0);
  for (int p = 0; p < pixels; ++p) {
    const Vec3 d = cam.ray_direction(p % w + 0.5, p / w + 0.5);
    const double dz = d.dot(forward);
    double t0 = cam.near / dz, t1 = cam.far / dz;
    bool hit = true;
    if (cfg.clip_box) hit = clip_ray(origin, d, *cfg.clip_box, t0, t1);
    dirs[p] = d;
    t_start[p] = t0;
    t_end[p] = t1;
    rs.offset[p + 1] = rs.offset[p] + (hit ? n : 0);
  }
  const int total = rs.offset[pixels];
  rs.points.resize(total, 3);
  rs.z.resize(total);
  rs.delta.resize(total);
#pragma omp parallel for schedule(static) num_threads(resolve_threads(cfg.threads))
  for (int p = 0; p < pixels; ++p) {
    if (rs.offset[p + 1] == rs.offset[p]) continue;
    const double dz = dirs[p].dot(forward);
    const double bin = (t_end[p] - t_start[p]) / n;
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(p)));
    for (int i = 0; i < n; ++i) {
      const double u = cfg.jitter ? rng.uniform() : 0.5;
      const double t = t_start[p] + (i + u) * bin;
      const int s = rs.offset[p] + i;
      rs.points.row(s) = (origin + t * dirs[p]).transpose();
      rs.z[s] = t * dz;
      rs.delta[s] = bin;
    }
  }
  return rs;
}

// Composites ray p into out; returns how many samples were used before termination.
int composite(const RaySamples& rs, const VecX& density, const Points& color, const VolumeRenderConfig& cfg,
              int p, RenderOutput& out) {
  double trans = 1.0, depth = 0.0;
  Vec3 c = Vec3::Zero();
  int used = 0;
  for (int s = rs.offset[p]; s < rs.offset[p + 1]; ++s) {
    const double a = 1.0 - std::exp(-density[s] * rs.delta[s]);
    const double wgt = trans * a;
    c += wgt * color.row(s).transpose();
    depth += wgt * rs.z[s];
    trans *= 1.0 - a;
    ++used;
    if (trans < cfg.min_transmittance) break;
  }
  c += trans * cfg.background;
  for (int k = 0; k < 3; ++k) out.color.data[3 * p + k] = c[k];
  out.alpha.data[p] = 1.0 - trans;
  out.depth.data[p] = depth;
  return used;
}

struct Forward {
  RaySamples rs;
  VecX density;
  Points color;
  std::vector<int> used;
  RenderOutput image;
};

Forward forward_pass(const FieldQuery& field, const Camera& cam, const VolumeRenderConfig& cfg) {
  cam.validate();
  Forward f;
  f.rs = build_samples(cam, cfg);
  field.query(f.rs.points, f.density, f.color);
  const int w = cam.width, h = cam.height;
  f.image = RenderOutput{Image(w, h, 3), Image(w, h, 1), Image(w, h, 1)};
  f.used.assign(static_cast<std::size_t>(w) * h, 0);
#pragma omp parallel for schedule(static) num_threads(resolve_threads(cfg.threads))
  for (int p = 0; p < w * h; ++p) f.used[p] = composite(f.rs, f.density, f.color, cfg, p, f.image);
  return f;
}

VecX backward_pass(const RadianceField& field, const Camera& cam, const Forward& f, const VolumeGrads& grads,
                   const VolumeRenderConfig& cfg) {
  const int w = cam.width, h = cam.height, pixels = w * h;
  auto check = [&](const Image& img, int channels) {
    if (!img.data.empty() && (img.width != w || img.height != h || img.channels != channels)) {
      throw std::invalid_argument("volume render gradient image has the wrong shape");
    }
    return !img.data.empty();
  };
  const bool has_color = check(grads.color, 3);
  const bool has_alpha = check(grads.alpha, 1);
  const bool has_depth = check(grads.depth, 1);

  // compact the samples that receive gradient: rays with upstream signal, up to termination
  std::vector<int> start(pixels + 1, 0);
  std::vector<Vec3> gcs(pixels);
  std::vector<double> gas(pixels), gds(pixels);
  for (int p = 0; p < pixels; ++p) {
    gcs[p] = has_color ? Vec3(grads.color.data[3 * p], grads.color.data[3 * p + 1], grads.color.data[3 * p + 2])
                       : Vec3::Zero();
    gas[p] = has_alpha ? grads.alpha.data[p] : 0.0;
    gds[p] = has_depth ? grads.depth.data[p] : 0.0;
    const bool live = !gcs[p].isZero(0.0) || gas[p] != 0.0 || gds[p] != 0.0;
    start[p + 1] = start[p] + (live ? f.used[p] : 0);
  }
  const int active = start[pixels];
  Points pts(active, 3);
  VecX d_density(active);
  Points d_color(active, 3);

#pragma omp parallel for schedule(static) num_threads(resolve_threads(cfg.threads))
  for (int p = 0; p < pixels; ++p) {
    const int n = start[p + 1] - start[p];
    if (n == 0) continue;
    const int begin = f.rs.offset[p];
    const Vec3& gc = gcs[p];
    // L = Σ w_i v_i + T_final v_bg with v_i = gc·c_i + gd·z_i + ga
    std::vector<double> a(n), trans(n + 1), value(n);
    trans[0] = 1.0;
    for (int i = 0; i < n; ++i) {
      const int s = begin + i;
      a[i] = 1.0 - std::exp(-f.density[s] * f.rs.delta[s]);
      trans[i + 1] = trans[i] * (1.0 - a[i]);
      value[i] = gc.dot(f.color.row(s).transpose()) + gds[p] * f.rs.z[s] + gas[p];
    }
    double behind = trans[n] * gc.dot(cfg.background);  // Σ_{j>i} w_j v_j + T_final v_bg
    for (int i = n - 1; i >= 0; --i) {
      const int s = begin + i, k = start[p] + i;
      pts.row(k) = f.rs.points.row(s);
      d_density[k] = f.rs.delta[s] * (trans[i + 1] * value[i] - behind);
      const double wgt = trans[i] * a[i];
      d_color.row(k) = (wgt * gc).transpose();
      behind += wgt * value[i];
    }
  }
  VecX d_params = VecX::Zero(field.num_params());
  field.backward(pts, d_density, d_color, d_params, cfg.threads);
  return d_params;
}

}  // namespace

RenderOutput volume_render(const FieldQuery& field, const Camera& cam, const VolumeRenderConfig& cfg) {
  return forward_pass(field, cam, cfg).image;
}

VecX volume_render_backward(const RadianceField& field, const Camera& cam, const VolumeGrads& grads,
                            const VolumeRenderConfig& cfg) {
  return backward_pass(field, cam, forward_pass(field, cam, cfg), grads, cfg);
}

VolumeStep volume_render_step(const RadianceField& field, const Camera& cam,
                              const std::function<VolumeGrads(const RenderOutput&)>& loss_grad,
                              const VolumeRenderConfig& cfg) {
  Forward f = forward_pass(field, cam, cfg);
  const VolumeGrads grads = loss_grad(f.image);
  VolumeStep out;
  out.grad = backward_pass(field, cam, f, grads, cfg);
  out.image = std::move(f.image);
  return out;
}

// ---- geometry loss --------------------------------------------------------------------

GeometrySamples sample_geometry(const BodyTemplate& tmpl, const Points& vertices, int n_samples,
                                std::uint64_t seed, const GeometryLossConfig& cfg) {
  std::vector<int> tris;
  for (const auto& part : cfg.parts) {
    auto it = tmpl.part_labels.find(part);
    if (it == tmpl.part_labels.end()) throw std::invalid_argument("template has no part '" + part + "'");
    tris.insert(tris.end(), it->second.begin(), it->second.end());
  }
  std::vector<double> cumulative;
  double total = 0.0;
  for (int f : tris) {
    const Vec3 a = vertices.row(tmpl.faces(f, 0)).transpose();
    const Vec3 b = vertices.row(tmpl.faces(f, 1)).transpose();
    const Vec3 c = vertices.row(tmpl.faces(f, 2)).transpose();
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative.push_back(total);
  }
  if (tris.empty() || total <= 0.0) throw std::invalid_argument("constrained parts have no area");
  const auto [lo, hi] = std::pair<Vec3, Vec3>(vertices.colwise().minCoeff().transpose(),
                                              vertices.colwise().maxCoeff().transpose());
  const double band = cfg.band_fraction * (hi - lo).norm();

  GeometrySamples s;
  s.on_mesh.resize(n_samples, 3);
  s.off_mesh.resize(n_samples, 3);
  Rng rng(seed);
  for (int i = 0; i < n_samples; ++i) {
    const double pick = rng.uniform() * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    const int f = tris[std::min<std::size_t>(it - cumulative.begin(), tris.size() - 1)];
    const double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    const Vec3 a = vertices.row(tmpl.faces(f, 0)).transpose();
    const Vec3 b = vertices.row(tmpl.faces(f, 1)).transpose();
    const Vec3 c = vertices.row(tmpl.faces(f, 2)).transpose();
    const Vec3 p = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c;
    const Vec3 normal = (b - a).cross(c - a).normalized();
    s.on_mesh.row(i) = p.transpose();
    s.off_mesh.row(i) = (p + band * normal).transpose();
  }
  return s;
}

namespace {

// loss and dL/dτ for stacked [on; off] densities
double margin_terms(const VecX& tau, int n, const GeometryLossConfig& cfg, VecX* d_tau) {
  const double inv = 1.0 / (2.0 * n);
  double loss = 0.0;
  if (d_tau) *d_tau = VecX::Zero(2 * n);
  for (int i = 0; i < 2 * n; ++i) {
    const double gap = i < n ? cfg.tau_max - tau[i] : tau[i] - cfg.tau_min;
    if (gap <= 0.0) continue;
    loss += gap * gap * inv;
    if (d_tau) (*d_tau)[i] = (i < n ? -2.0 : 2.0) * gap * inv;
  }
  return loss;
}

Points stack(const GeometrySamples& s) {
  Points all(s.on_mesh.rows() + s.off_mesh.rows(), 3);
  all << s.on_mesh, s.off_mesh;
  return all;
}

}  // namespace

LossAndGrad geometry_loss(const RadianceField& field, const BodyTemplate& tmpl, const Pose& pose,
                          int n_samples, std::uint64_t seed, const GeometryLossConfig& cfg) {
  const Points posed = lbs_transform(tmpl, pose).vertices;
  const Points all = stack(sample_geometry(tmpl, posed, n_samples, seed, cfg));
  VecX tau;
  Points color;
  field.query(all, tau, color);
  LossAndGrad out;
  VecX d_tau;
  out.loss = margin_terms(tau, n_samples, cfg, &d_tau);
  out.grad = VecX::Zero(field.num_params());
  field.backward(all, d_tau, Points::Zero(all.rows(), 3), out.grad);
  return out;
}

double geometry_loss_value(const std::function<VecX(const Points&)>& density, const GeometrySamples& s,
                           const GeometryLossConfig& cfg) {
  return margin_terms(density(stack(s)), static_cast<int>(s.on_mesh.rows()), cfg, nullptr);
}

// ---- extraction ----------------------------------------------------------------------

Points extract_points(const std::function<VecX(const Points&)>& density, int res, double threshold,
                      const Vec3& lo, const Vec3& hi) {
  if (res < 2) throw std::invalid_argument("grid resolution must be at least 2");
  const Vec3 cell = (hi - lo) / res;
  std::vector<Vec3> kept;
  Points slice(res * res, 3);
  for (int z = 0; z < res; ++z) {
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        slice.row(y * res + x) = (lo + Vec3((x + 0.5) * cell.x(), (y + 0.5) * cell.y(), (z + 0.5) * cell.z()))
                                     .transpose();
      }
    }
    const VecX tau = density(slice);
    for (int k = 0; k < res * res; ++k) {
      if (tau[k] > threshold) kept.push_back(slice.row(k).transpose());
    }
  }
  Points out(static_cast<int>(kept.size()), 3);
  for (std::size_t k = 0; k < kept.size(); ++k) out.row(k) = kept[k].transpose();
  return out;
}

Points extract_points(const FieldQuery& field, int res, double threshold, const Vec3& lo, const Vec3& hi) {
  return extract_points(
      [&](const Points& pts) {
        VecX tau;
        Points color;
        field.query(pts, tau, color);
        return tau;
      },
      res, threshold, lo, hi);
}

// ---- pretraining ---------------------------------------------------------------------

double silhouette_iou(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("IoU needs images of the same shape");
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.data.size(); ++k) {
    const bool x = a.data[k] >= 0.5, y = b.data[k] >= 0.5;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

PretrainLog pretrain(RadianceField& field, const BodyTemplate& tmpl, const Pose& pose,
                     const PretrainConfig& cfg, std::uint64_t seed) {
  PretrainLog log;
  if (cfg.steps <= 0) return log;
  const Points posed = lbs_transform(tmpl, pose).vertices;
  const auto [body, face] = body_and_face_centers(tmpl, posed);
  VolumeRenderConfig rcfg = cfg.render;
  if (!rcfg.clip_box) rcfg.clip_box = padded_bounds(posed);
  Adam adam(field.num_params(), AdamConfig{cfg.lr});
  Rng rng(seed);
  for (int step = 0; step < cfg.steps; ++step) {
    const int res = step < cfg.coarse_fraction * cfg.steps ? cfg.coarse_resolution : cfg.resolution;
    adam.set_lr(cfg.lr * std::pow(cfg.lr_final / cfg.lr, static_cast<double>(step) / cfg.steps));
    const CameraSample cs = sample_camera(cfg.cameras, rng, body, face, res, res);
    const MeshRender mesh = rasterize_mesh(posed, tmpl.faces, cs.camera);
    rcfg.seed = derive_seed(seed, static_cast<std::uint64_t>(step));
    double loss = 0.0;
    const VolumeStep vs = volume_render_step(field, cs.camera, [&](const RenderOutput& out) {
      const double inv = 1.0 / static_cast<double>(out.alpha.pixel_count());
      VolumeGrads grads{Image(), Image(out.alpha.width, out.alpha.height, 1),
                        Image(out.alpha.width, out.alpha.height, 1)};
      for (std::size_t p = 0; p < out.alpha.data.size(); ++p) {
        const double ea = out.alpha.data[p] - mesh.silhouette.data[p];
        const double ed = mesh.silhouette.data[p] * (out.depth.data[p] - mesh.depth.data[p]);
        loss += (ea * ea + cfg.depth_weight * ed * ed) * inv;
        grads.alpha.data[p] = 2.0 * ea * inv;
        grads.depth.data[p] = 2.0 * cfg.depth_weight * ed * mesh.silhouette.data[p] * inv;
      }
      return grads;
    }, rcfg);
    const VecX& g = vs.grad;
    adam.step(field.params().data(), g.data());
    log.losses.push_back(loss);
  }
  return log;
}

}  // namespace skelsplat
