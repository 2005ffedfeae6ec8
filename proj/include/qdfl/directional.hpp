#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "qdfl/tensor.hpp"

namespace qdfl {

/// Pooling direction over a square d x d map.
enum class Direction : unsigned char {
    horizontal = 0,  // one output per row
    vertical = 1,    // one output per column
    diagonal = 2,    // one output per diagonal, offset (x - y) from +(d-1) down to -(d-1)
    anti_diagonal = 3,  // one output per anti-diagonal, (x + y) from 0 up to 2(d-1)
};

inline constexpr std::array<Direction, 4> kAllDirections = {
    Direction::horizontal, Direction::vertical, Direction::diagonal, Direction::anti_diagonal};

char direction_letter(Direction d);
Direction direction_from_letter(char c);
std::string_view direction_name(Direction d);

/// Output length for a d x d input: d for H/V, 2d - 1 for D/A.
std::size_t directional_length(Direction dir, std::size_t d);

/**
 * Grouping of the d*d spatial positions of a square map into output slots.
 *
 * Positions are flattened row-major, p = y * d + x. Every position belongs to
 * exactly one group; each output is the mean of its group.
 */
class PoolPlan {
public:
    PoolPlan(Direction dir, std::size_t d);

    Direction direction() const { return dir_; }
    std::size_t source_d() const { return d_; }
    std::size_t length() const { return groups_.size(); }
    const std::vector<std::size_t>& group(std::size_t t) const { return groups_.at(t); }
    std::size_t divisor(std::size_t t) const { return groups_.at(t).size(); }
    /// Output slot owning spatial position p.
    std::size_t slot_of(std::size_t p) const { return slot_.at(p); }

private:
    Direction dir_;
    std::size_t d_;
    std::vector<std::vector<std::size_t>> groups_;
    std::vector<std::size_t> slot_;
};

/// Pooled values for one direction, stored (n, L, 1, c) for every direction
/// (vertical results are stored already transposed).
struct DirectionalMap {
    Direction direction = Direction::horizontal;
    Tensor4 values;
    std::size_t source_d = 0;

    std::size_t length() const { return values.shape().h; }
};

DirectionalMap directional_pool(const Tensor4& x, Direction dir);
DirectionalMap directional_pool(const Tensor4& x, const PoolPlan& plan);

DirectionalMap hap_forward(const Tensor4& x);
DirectionalMap vap_forward(const Tensor4& x);
DirectionalMap dap_forward(const Tensor4& x);
DirectionalMap aap_forward(const Tensor4& x);

/// Adjoint of directional_pool: every source position in slot t receives
/// grad(t) / |group t|. Returns an (n, d, d, c) tensor.
Tensor4 directional_backward(const DirectionalMap& grad_out, const PoolPlan& plan);

// ---------------------------------------------------------------------------
// Spatial normalisation
// ---------------------------------------------------------------------------

/// Positions [first, last] forming the window around j in a map of length L:
/// j - floor((w-1)/2) .. j + ceil((w-1)/2), clipped to [0, L). For w = 4 this
/// is j-1 .. j+2.
struct Window {
    std::size_t first;
    std::size_t last;
};
Window sn_window(std::size_t j, std::size_t length, std::size_t window);

struct SpatialNormCache {
    Tensor4 input;
    Tensor4 output;
    Tensor4 denom;  // sqrt(1 + sum over window of input^2), same shape as input
    std::size_t window = 4;
};

/// Z_j = P_j / sqrt(1 + sum_{l in N_j} P_l^2), independently per sample and channel.
DirectionalMap spatial_norm_forward(const DirectionalMap& p, std::size_t window,
                                    SpatialNormCache* cache = nullptr);

/// Exact adjoint of spatial_norm_forward at the cached point:
///   dP_m = g_m / s_m - P_m * sum_{j : m in N_j} g_j Z_j / s_j^2
DirectionalMap spatial_norm_backward(const DirectionalMap& grad_out, const SpatialNormCache& cache);

}  // namespace qdfl
