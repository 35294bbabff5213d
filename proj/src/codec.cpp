#include "mvdiff/codec.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace mvdiff {

void VideoClip::validate() const {
    if (!pixels.defined() || pixels.rank() != 5 || pixels.dim(4) != 3)
        throw TensorError("video: pixels must be {T,C,H,W,3}, got " +
                          (pixels.defined() ? shape_str(pixels.shape()) : std::string("<empty>")));
    for (double v : pixels.data())
        if (v < 0.0 || v > 1.0) throw TensorError("video: pixel values must lie in [0,1]");
}

void CodecSpec::validate() const {
    if (temporal_ratio * spatial_ratio * spatial_ratio != 256)
        throw TensorError("codec: temporal_ratio * spatial_ratio^2 must equal 256, got " +
                          std::to_string(temporal_ratio) + " * " + std::to_string(spatial_ratio) +
                          "^2");
    if (latent_channels < 1) throw TensorError("codec: latent_channels must be >= 1");
}

bool frame_count_admissible(int64_t frames) {
    if (frames == 1) return true;
    if (frames >= 8 && (frames % 8 == 0 || frames % 8 == 1)) return true;
    return false;
}

int64_t latent_frame_count(int64_t frames) {
    if (!frame_count_admissible(frames))
        throw TensorError("codec: frame count must be 1, 8n, or 8n+1 (n>=1); got " +
                          std::to_string(frames));
    if (frames == 1) return 1;
    if (frames % 8 == 0) return frames / 4;  // 8n -> 2n
    return (frames - 1) / 4 + 1;             // 8n+1 -> 2n+1
}

int64_t video_frame_count(int64_t latent_frames) {
    if (latent_frames < 1) throw TensorError("codec: latent frame count must be >= 1");
    if (latent_frames == 1) return 1;
    if (latent_frames % 2 == 1) return 4 * (latent_frames - 1) + 1;  // 2n+1 -> 8n+1
    return 4 * latent_frames;                                       // 2n -> 8n
}

namespace {

// window decomposition of the frame axis: first frame alone for the 8n+1
// family, otherwise straight windows of the temporal ratio
struct Window {
    int64_t start, len;
};

std::vector<Window> frame_windows(int64_t frames, int temporal_ratio) {
    std::vector<Window> w;
    int64_t t = 0;
    if (frames % 8 == 1 || frames == 1) {
        w.push_back({0, 1});
        t = 1;
    }
    for (; t < frames; t += temporal_ratio) w.push_back({t, temporal_ratio});
    return w;
}

// orthonormal DCT-II matrix, row k column n
std::vector<double> dct_matrix(int n) {
    std::vector<double> m(n * n);
    for (int k = 0; k < n; ++k) {
        double c = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int j = 0; j < n; ++j)
            m[k * n + j] = c * std::cos(M_PI * (2 * j + 1) * k / (2.0 * n));
    }
    return m;
}

// coefficient placement for a (kt, kc, ku, kv) block, ordered by total
// frequency so the DC coefficient takes channel 0
std::vector<std::array<int, 4>> coeff_order(int wt, int s) {
    std::vector<std::array<int, 4>> order;
    for (int kt = 0; kt < wt; ++kt)
        for (int kc = 0; kc < 3; ++kc)
            for (int ku = 0; ku < s; ++ku)
                for (int kv = 0; kv < s; ++kv) order.push_back({kt, kc, ku, kv});
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        int sa = a[0] + a[1] + a[2] + a[3], sb = b[0] + b[1] + b[2] + b[3];
        if (sa != sb) return sa < sb;
        return a < b;
    });
    return order;
}

// apply an orthonormal matrix (or its transpose) along one axis of a small
// 4-d block [d0][d1][d2][d3], in place
void apply_axis(std::vector<double>& blk, const std::array<int64_t, 4>& dims, int axis,
                const std::vector<double>& m, int n) {
    std::array<int64_t, 4> st;
    st[3] = 1;
    for (int i = 2; i >= 0; --i) st[i] = st[i + 1] * dims[i + 1];
    std::vector<double> lane(n), out(n);
    int64_t total = dims[0] * dims[1] * dims[2] * dims[3];
    int64_t lanes = total / n;
    std::array<int64_t, 4> idx{0, 0, 0, 0};
    for (int64_t l = 0; l < lanes; ++l) {
        int64_t base = 0;
        for (int i = 0; i < 4; ++i) base += idx[i] * st[i];
        for (int j = 0; j < n; ++j) lane[j] = blk[base + j * st[axis]];
        for (int k = 0; k < n; ++k) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += m[k * n + j] * lane[j];
            out[k] = s;
        }
        for (int j = 0; j < n; ++j) blk[base + j * st[axis]] = out[j];
        for (int i = 3; i >= 0; --i) {
            if (i == axis) continue;
            idx[i]++;
            if (idx[i] < dims[i]) break;
            idx[i] = 0;
        }
    }
}

std::vector<double> transpose_sq(const std::vector<double>& m, int n) {
    std::vector<double> t(n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) t[j * n + i] = m[i * n + j];
    return t;
}

}  // namespace

LatentTensor encode(const VideoClip& video, const CodecSpec& spec) {
    spec.validate();
    const int64_t T = video.frames(), C = video.views(), H = video.height(), W = video.width();
    if (!frame_count_admissible(T))
        throw TensorError("codec: frame count must be 1, 8n, or 8n+1 (n>=1); got " +
                          std::to_string(T));
    const int s = spec.spatial_ratio;
    if (H % s != 0 || W % s != 0)
        throw TensorError("codec: H and W must be divisible by " + std::to_string(s) + ", got " +
                          std::to_string(H) + "x" + std::to_string(W));
    const int64_t Tp = latent_frame_count(T);
    const int64_t hp = H / s, wp = W / s;
    const int d = spec.latent_channels;

    auto windows = frame_windows(T, spec.temporal_ratio);
    auto spat = dct_matrix(s);
    auto temp = dct_matrix(spec.temporal_ratio);
    auto col = dct_matrix(3);
    auto order_w = coeff_order(spec.temporal_ratio, s);
    auto order_1 = coeff_order(1, s);

    std::vector<double> out(Tp * C * hp * wp * d, 0.0);
    const double* px = video.pixels.data().data();
    auto pix = [&](int64_t t, int64_t c, int64_t y, int64_t x, int64_t ch) {
        return px[(((t * C + c) * H + y) * W + x) * 3 + ch];
    };

    std::vector<double> blk;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t lf = 0; lf < Tp; ++lf) {
            const Window& win = windows[lf];
            const auto& order = win.len == 1 ? order_1 : order_w;
            std::array<int64_t, 4> dims{win.len, 3, s, s};
            for (int64_t by = 0; by < hp; ++by) {
                for (int64_t bx = 0; bx < wp; ++bx) {
                    blk.assign(win.len * 3 * s * s, 0.0);
                    for (int64_t t = 0; t < win.len; ++t)
                        for (int64_t ch = 0; ch < 3; ++ch)
                            for (int64_t y = 0; y < s; ++y)
                                for (int64_t x = 0; x < s; ++x)
                                    blk[((t * 3 + ch) * s + y) * s + x] =
                                        pix(win.start + t, c, by * s + y, bx * s + x, ch);
                    if (win.len > 1) apply_axis(blk, dims, 0, temp, spec.temporal_ratio);
                    apply_axis(blk, dims, 1, col, 3);
                    apply_axis(blk, dims, 2, spat, s);
                    apply_axis(blk, dims, 3, spat, s);
                    double* cell = out.data() + (((lf * C + c) * hp + by) * wp + bx) * d;
                    int64_t keep = std::min<int64_t>(d, static_cast<int64_t>(order.size()));
                    for (int64_t k = 0; k < keep; ++k) {
                        const auto& o = order[k];
                        cell[k] = blk[((o[0] * 3 + o[1]) * s + o[2]) * s + o[3]];
                    }
                }
            }
        }
    }

    LatentTensor lat;
    lat.values = Tensor({Tp, C, hp, wp, d}, std::move(out));
    lat.video_frames = T;
    lat.video_height = H;
    lat.video_width = W;
    lat.spec = spec;
    return lat;
}

VideoClip decode(const LatentTensor& latent) {
    const CodecSpec& spec = latent.spec;
    spec.validate();
    if (latent.values.rank() != 5)
        throw TensorError("codec: latent values must be rank 5, got " +
                          shape_str(latent.values.shape()));
    if (latent.channels() != spec.latent_channels)
        throw TensorError("codec: latent channel count " + std::to_string(latent.channels()) +
                          " does not match spec latent_channels " +
                          std::to_string(spec.latent_channels));
    const int64_t Tp = latent.latent_frames(), C = latent.views();
    const int64_t hp = latent.grid_h(), wp = latent.grid_w();
    const int s = spec.spatial_ratio;
    const int d = spec.latent_channels;
    const int64_t T = latent.video_frames > 0 ? latent.video_frames : video_frame_count(Tp);
    if (latent_frame_count(T) != Tp)
        throw TensorError("codec: latent frame count " + std::to_string(Tp) +
                          " inconsistent with video frame count " + std::to_string(T));
    const int64_t H = hp * s, W = wp * s;

    auto windows = frame_windows(T, spec.temporal_ratio);
    auto spat_t = transpose_sq(dct_matrix(s), s);
    auto temp_t = transpose_sq(dct_matrix(spec.temporal_ratio), spec.temporal_ratio);
    auto col_t = transpose_sq(dct_matrix(3), 3);
    auto order_w = coeff_order(spec.temporal_ratio, s);
    auto order_1 = coeff_order(1, s);

    std::vector<double> out(T * C * H * W * 3, 0.0);
    const double* lv = latent.values.data().data();

    std::vector<double> blk;
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t lf = 0; lf < Tp; ++lf) {
            const Window& win = windows[lf];
            const auto& order = win.len == 1 ? order_1 : order_w;
            std::array<int64_t, 4> dims{win.len, 3, s, s};
            for (int64_t by = 0; by < hp; ++by) {
                for (int64_t bx = 0; bx < wp; ++bx) {
                    blk.assign(win.len * 3 * s * s, 0.0);
                    const double* cell = lv + (((lf * C + c) * hp + by) * wp + bx) * d;
                    int64_t keep = std::min<int64_t>(d, static_cast<int64_t>(order.size()));
                    for (int64_t k = 0; k < keep; ++k) {
                        const auto& o = order[k];
                        blk[((o[0] * 3 + o[1]) * s + o[2]) * s + o[3]] = cell[k];
                    }
                    apply_axis(blk, dims, 3, spat_t, s);
                    apply_axis(blk, dims, 2, spat_t, s);
                    apply_axis(blk, dims, 1, col_t, 3);
                    if (win.len > 1) apply_axis(blk, dims, 0, temp_t, spec.temporal_ratio);
                    for (int64_t t = 0; t < win.len; ++t)
                        for (int64_t ch = 0; ch < 3; ++ch)
                            for (int64_t y = 0; y < s; ++y)
                                for (int64_t x = 0; x < s; ++x)
                                    out[((((win.start + t) * C + c) * H + by * s + y) * W +
                                         bx * s + x) *
                                            3 +
                                        ch] = blk[((t * 3 + ch) * s + y) * s + x];
                }
            }
        }
    }

    VideoClip clip;
    clip.pixels = Tensor({T, C, H, W, 3}, std::move(out));
    return clip;
}

double psnr(double peak, double mse) {
    if (mse <= 0.0) return 300.0;
    return std::min(300.0, 10.0 * std::log10(peak * peak / mse));
}

double roundtrip_psnr(const VideoClip& video, const CodecSpec& spec) {
    VideoClip rec = decode(encode(video, spec));
    const auto& a = video.pixels.data();
    const auto& b = rec.pixels.data();
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    return psnr(1.0, mse);
}

}  // namespace mvdiff
