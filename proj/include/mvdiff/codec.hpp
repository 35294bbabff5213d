#pragma once

#include "mvdiff/tensor.hpp"
#include "mvdiff/video.hpp"

namespace mvdiff {

// Fixed invertible spatio-temporal codec standing in for a learned video
// autoencoder. The first frame passes through alone; every following
// non-overlapping window of `temporal_ratio` frames maps to one latent
// frame through an orthonormal temporal transform. Spatial blocks of
// spatial_ratio^2 pixels go through an orthonormal 2-d transform, the rgb
// axis through an orthonormal 3-point transform. Coefficients are ordered
// by total frequency (DC first) and truncated or zero-padded to
// latent_channels.
struct CodecSpec {
    int temporal_ratio = 4;
    int spatial_ratio = 8;
    int latent_channels = 16;

    void validate() const;  // temporal_ratio * spatial_ratio^2 == 256
    // channel count at which every window is represented exactly
    int full_rank_channels() const { return temporal_ratio * spatial_ratio * spatial_ratio * 3; }
};

bool frame_count_admissible(int64_t frames);
// 1 -> 1, 8n -> 2n, 8n+1 -> 2n+1; throws on other frame counts
int64_t latent_frame_count(int64_t frames);
// inverse; the 8n+1 form is preferred when the latent count is odd
int64_t video_frame_count(int64_t latent_frames);

struct LatentTensor {
    Tensor values;  // {T', C, h', w', d}
    int64_t video_frames = 0;
    int64_t video_height = 0;
    int64_t video_width = 0;
    CodecSpec spec;

    int64_t latent_frames() const { return values.dim(0); }
    int64_t views() const { return values.dim(1); }
    int64_t grid_h() const { return values.dim(2); }
    int64_t grid_w() const { return values.dim(3); }
    int64_t channels() const { return values.dim(4); }
};

LatentTensor encode(const VideoClip& video, const CodecSpec& spec = {});
VideoClip decode(const LatentTensor& latent);

// 10*log10(peak^2/mse), capped at the 300 dB sentinel (returned when mse == 0)
double psnr(double peak, double mse);
double roundtrip_psnr(const VideoClip& video, const CodecSpec& spec = {});

}  // namespace mvdiff
