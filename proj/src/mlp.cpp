#include "skelsplat/mlp.hpp"

#include <omp.h>

#include <stdexcept>

namespace skelsplat {

// Higher bands come from the double-angle identities, one sin/cos per coordinate.
Block FrequencyEncoding::encode(const Points& points) const {
  const int m = static_cast<int>(points.rows());
  Block out(dim(), m);
  const double inv_r = 1.0 / radius;
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double x = (points(i, c) - center[c]) * inv_r;
      out(c, i) = x;
      double s = std::sin(kPi * x), co = std::cos(kPi * x);
      for (int k = 0; k < bands; ++k) {
        out(3 + 6 * k + c, i) = s;
        out(6 + 6 * k + c, i) = co;
        const double s2 = 2.0 * s * co;
        co = (co - s) * (co + s);
        s = s2;
      }
    }
  }
  return out;
}

Points FrequencyEncoding::backward(const Points& points, const Block& d_encoded) const {
  const int m = static_cast<int>(points.rows());
  Points d(m, 3);
  const double inv_r = 1.0 / radius;
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double x = (points(i, c) - center[c]) * inv_r;
      double g = d_encoded(c, i);
      double s = std::sin(kPi * x), co = std::cos(kPi * x);
      double freq = kPi;
      for (int k = 0; k < bands; ++k) {
        g += d_encoded(3 + 6 * k + c, i) * freq * co;
        g -= d_encoded(6 + 6 * k + c, i) * freq * s;
        const double s2 = 2.0 * s * co;
        co = (co - s) * (co + s);
        s = s2;
        freq *= 2.0;
      }
      d(i, c) = g * inv_r;
    }
  }
  return d;
}

Mlp::Mlp(int inputs, const std::vector<int>& hidden, int outputs) {
  sizes_.push_back(inputs);
  for (int h : hidden) sizes_.push_back(h);
  sizes_.push_back(outputs);
  int total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    if (sizes_[l] <= 0 || sizes_[l + 1] <= 0) throw std::invalid_argument("layer sizes must be positive");
    offsets_.push_back(total);
    total += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
  }
  params = VecX::Zero(total);
}

void Mlp::init(Rng& rng, double output_gain) {
  const int layers = static_cast<int>(offsets_.size());
  for (int l = 0; l < layers; ++l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    const double bound = std::sqrt(6.0 / in) * (l + 1 == layers ? output_gain / std::sqrt(2.0) : 1.0);
    for (int k = 0; k < in * out; ++k) params[offsets_[l] + k] = rng.uniform(-bound, bound);
    for (int k = 0; k < out; ++k) params[offsets_[l] + in * out + k] = 0.0;
  }
}

Block Mlp::forward(const Block& x, std::vector<Block>* cache) const {
  if (x.rows() != inputs()) throw std::invalid_argument("MLP input has wrong feature count");
  const int layers = static_cast<int>(offsets_.size());
  if (cache) cache->assign(layers, Block());
  Block h = x;
  for (int l = 0; l < layers; ++l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    Eigen::Map<const Eigen::MatrixXd> w(params.data() + offsets_[l], out, in);
    Eigen::Map<const Eigen::VectorXd> b(params.data() + offsets_[l] + in * out, out);
    Block z = w * h;
    z.colwise() += b;
    if (l + 1 < layers) z = z.cwiseMax(0.0);
    if (cache) (*cache)[l] = std::move(h);
    h = std::move(z);
  }
  return h;
}

void Mlp::backward(const std::vector<Block>& cache, const Block& d_out, Eigen::Ref<VecX> d_params,
                   Block* d_input) const {
  const int layers = static_cast<int>(offsets_.size());
  Block dz = d_out;
  for (int l = layers - 1; l >= 0; --l) {
    const int in = sizes_[l], out = sizes_[l + 1];
    Eigen::Map<const Eigen::MatrixXd> w(params.data() + offsets_[l], out, in);
    Eigen::Map<Eigen::MatrixXd> dw(d_params.data() + offsets_[l], out, in);
    Eigen::Map<Eigen::VectorXd> db(d_params.data() + offsets_[l] + in * out, out);
    const Block& h = cache[l];
    dw.noalias() += dz * h.transpose();
    db += dz.rowwise().sum();
    if (l == 0 && !d_input) break;
    Block dh = w.transpose() * dz;
    if (l > 0) {
      dh = (h.array() > 0.0).select(dh, 0.0);
      dz = std::move(dh);
    } else {
      *d_input = std::move(dh);
    }
  }
}

void for_each_chunk(int count, int chunk, int lanes, int threads,
                    const std::function<void(int, int, int)>& fn) {
  if (count <= 0) return;
  const int chunks = (count + chunk - 1) / chunk;
  const int used = std::min(lanes, chunks);
  const int nthreads = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 1) num_threads(nthreads)
  for (int lane = 0; lane < used; ++lane) {
    for (int c = lane; c < chunks; c += lanes) {
      const int begin = c * chunk;
      fn(begin, std::min(count, begin + chunk), lane);
    }
  }
}

}  // namespace skelsplat
