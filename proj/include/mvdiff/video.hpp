#pragma once

#include "mvdiff/tensor.hpp"

namespace mvdiff {

// Multi-view pixel clip: frames x views x height x width x rgb, unit-scaled.
struct VideoClip {
    Tensor pixels;  // {T, C, H, W, 3}
    double fps = 12.0;

    int64_t frames() const { return pixels.dim(0); }
    int64_t views() const { return pixels.dim(1); }
    int64_t height() const { return pixels.dim(2); }
    int64_t width() const { return pixels.dim(3); }

    void validate() const;  // shape rank/channels and values in [0,1]
};

}  // namespace mvdiff
