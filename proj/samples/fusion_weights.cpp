// Turns per-modality p-values and stability scores into fusion weights
// and fuses two small feature vectors with them.
#include <cstdio>
#include <vector>

#include "cocoon/conformal.hpp"

using namespace cocoon;

namespace {

void show(const char* label, double p_a, double p_b, double s_a, double s_b, const FusionPolicy& policy = {}) {
  const auto u = fusion_weights(p_a, p_b, s_a, s_b, policy);
  std::printf("%-22s P=(%.2f, %.2f) S=(%.2f, %.2f) -> W=(%.3f, %.3f)%s\n", label, p_a, p_b, s_a, s_b, u.a.w, u.b.w,
              u.clipped ? "  [clipped]" : "");
}

}  // namespace

int main() {
  show("both trustworthy", 0.6, 0.6, 1.0, 1.0);
  show("camera blacked out", 0.02, 0.55, 0.4, 1.0);
  show("lidar noisy", 0.5, 0.1, 1.0, 0.6);
  show("lidar noisy, max rule", 0.5, 0.1, 1.0, 0.6, {0.7, ClipRule::either});

  // stability from a top-1 trace over four layers
  const auto trace = trace_from_indices({3, 3, 1, 3});
  std::printf("trace 3,3,1,3 -> S = %.3f\n", stability_score(trace));

  const std::vector<double> f_a{1.0, 0.0, 2.0}, f_b{0.0, 1.0, 2.0};
  const auto w = fusion_weights(0.02, 0.55, 0.4, 1.0).weights();
  const auto fused = fuse_features(f_a, f_b, w);
  std::printf("fused = [%.3f, %.3f, %.3f]\n", fused[0], fused[1], fused[2]);
}
