#pragma once

#include "skelsplat/math.hpp"
#include "skelsplat/rng.hpp"

#include <functional>
#include <vector>

namespace skelsplat {

/// Column-major activation block: features x batch.
using Block = Eigen::MatrixXd;

/// Per-coordinate frequency encoding [x, sin(2^k π x), cos(2^k π x)]_{k<bands}
/// applied to x' = (x - center) / radius.
struct FrequencyEncoding {
  int bands = 6;
  Vec3 center = Vec3::Zero();
  double radius = 1.0;

  int dim() const { return 3 + 6 * bands; }
  /// points: M x 3 rows; returns dim() x M.
  Block encode(const Points& points) const;
  /// Gradient with respect to the raw points given d(encoding), M x 3.
  Points backward(const Points& points, const Block& d_encoded) const;
};

/// Fully connected network with ReLU hidden layers and a linear output layer.
/// Parameters are one flat vector: per layer, a column-major (out x in) weight
/// block followed by the bias.
class Mlp {
 public:
  Mlp() = default;
  Mlp(int inputs, const std::vector<int>& hidden, int outputs);

  int inputs() const { return sizes_.front(); }
  int outputs() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  int num_params() const { return static_cast<int>(params.size()); }

  /// He-uniform hidden layers; the output layer is scaled by output_gain (0 gives zeros).
  void init(Rng& rng, double output_gain = 1.0);

  /// Returns outputs x batch. When cache is given it receives each layer's input.
  Block forward(const Block& x, std::vector<Block>* cache = nullptr) const;

  /// Accumulates parameter gradients into d_params; optionally returns d(input).
  void backward(const std::vector<Block>& cache, const Block& d_out, Eigen::Ref<VecX> d_params,
                Block* d_input = nullptr) const;

  VecX params;

 private:
  std::vector<int> sizes_;
  std::vector<int> offsets_;  // start of each layer's weights in params
};

/// Runs fn(chunk_begin, chunk_end, lane) over [0, count) in fixed-size chunks.
/// Chunk c always runs on lane c % lanes, and a lane's chunks run in order on one
/// thread, so per-lane accumulators are independent of the thread count.
void for_each_chunk(int count, int chunk, int lanes, int threads,
                    const std::function<void(int, int, int)>& fn);

inline constexpr int kGradientLanes = 16;

}  // namespace skelsplat
