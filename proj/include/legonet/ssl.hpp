#ifndef LEGONET_SSL_HPP
#define LEGONET_SSL_HPP

#include "legonet/train.hpp"

namespace lego {

struct SSLConfig {
    std::array<long, 3> grid{1, 3, 3};  // tiles per axis (D,H,W); 3x3 in plane
    double mask_ratio = 0.40;
    long mask_patch_edge = 8;
    uint64_t seed = 0;

    long n_patches() const { return grid[0] * grid[1] * grid[2]; }
    void validate() const;
};

struct CorruptionRecord {
    std::vector<long> permutation;  // dst tile index -> src tile index
    std::vector<double> mask;       // 1 where voxels were zeroed, padded shape
    std::array<long, 3> padded_shape{0, 0, 0};
};

// Pads each axis up to tile divisibility, then permutes the tiles. The result
// keeps the padded shape so no tile content is lost.
Volume partition_and_shuffle(const Volume& v, const SSLConfig& cfg, Rng& rng,
                             CorruptionRecord& record);

// Re-applies a recorded permutation (used to invert a shuffle).
Volume apply_permutation(const Volume& v, const SSLConfig& cfg,
                         const std::vector<long>& permutation);

std::vector<long> inverse_permutation(const std::vector<long>& p);

// Zeroes random non-overlapping cubes until the masked fraction first
// reaches mask_ratio; boundary cubes are clipped to the volume.
Volume apply_mask(const Volume& v, const SSLConfig& cfg, Rng& rng, std::vector<double>& mask_out);

// Shuffle then mask, one record for both.
Volume corrupt(const Volume& v, const SSLConfig& cfg, Rng& rng, CorruptionRecord& record);

// Mean squared error.
Tensor reconstruction_loss(const Tensor& pred, const Tensor& target);

// Same trunk as the segmentation build; 1x1x1 head to one intensity channel.
LegoNet build_pretrain_model(const ModelConfig& mc, uint64_t seed);

// Corrupt each volume with a (seed, epoch, case) stream, reconstruct the
// original, step the optimizer per case. Returns the epoch mean loss.
double pretrain_epoch(LegoNet& model, const std::vector<Volume>& volumes, const SSLConfig& cfg,
                      AdamwState& opt, const TrainConfig& tcfg, long epoch);

} // namespace lego

#endif
