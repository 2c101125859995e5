#ifndef LEGONET_VOLUME_HPP
#define LEGONET_VOLUME_HPP

#include "legonet/rng.hpp"

#include <array>
#include <string>
#include <vector>

namespace lego {

enum class IntensityDomain : uint8_t { HU = 0, Normalized = 1 };

struct Volume {
    std::array<long, 3> shape{0, 0, 0};       // D, H, W
    std::vector<double> data;                 // W fastest
    std::array<double, 3> spacing{1, 1, 1};   // mm
    std::array<long, 3> origin_extent{0, 0, 0};
    IntensityDomain domain = IntensityDomain::HU;

    long numel() const { return shape[0] * shape[1] * shape[2]; }
    double& at(long d, long h, long w) { return data[(d * shape[1] + h) * shape[2] + w]; }
    double at(long d, long h, long w) const { return data[(d * shape[1] + h) * shape[2] + w]; }
};

Volume make_volume(std::array<long, 3> shape, double fill = 0.0);

// LGV1 container: magic, u32 extents, f64 spacing, u8 domain flag, u32
// origin extents, float32 payload W-fastest.
Volume load_volume(const std::string& path);
void save_volume(const std::string& path, const Volume& v);

// HU -> clamp(-1024, 1024)/1024, flips the domain flag. Rejects re-application.
Volume clip_normalize(const Volume& v);

// Trilinear resample onto a 1mm grid; extent per axis = round(extent * spacing).
Volume resample_isotropic(const Volume& v);

enum class ResizeMode { Trilinear, Nearest };
Volume resize(const Volume& v, std::array<long, 3> target, ResizeMode mode);

struct SynthCase {
    std::string case_id;
    Volume image;  // normalized domain
    Volume mask;   // binary, wider than the tube by the perivascular factor
};

// Vertical bright tubes with lateral drift on a noisy background; the mask
// covers three tube radii around the centerline.
std::vector<SynthCase> synth_tube_dataset(long n_cases, long volume_edge, Rng& rng);

struct CaseRecord {
    std::string case_id, image_path, mask_path, cohort;
};

std::string manifest_csv(const std::vector<CaseRecord>& records);
std::vector<CaseRecord> parse_manifest(const std::string& csv);

} // namespace lego

#endif
