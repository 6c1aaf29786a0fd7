"""
Speckle forward process
=======================

Corrupts a synthetic image at the four standard noise levels with both the
exact multiplicative kernel and the log-domain kernel used during training,
and prints how far apart they are.
"""
import numpy as np

from despeckle import corrupt_log, corrupt_multiplicative, linear_schedule, psnr, synth_image

schedule = linear_schedule(0.005, 0.5, 200)
print("T =", schedule.T, " delta =", round(schedule.delta, 7))

clean = synth_image("piecewise", 64, seed=0)

# the four noise levels correspond to steps 30, 80, 150 and 200
for t in (30, 80, 150, 200):
    alpha = schedule.alpha(t)
    exact = corrupt_multiplicative(clean, alpha, seed=t)
    logd = corrupt_log(clean, alpha, seed=t)
    gap = np.mean(np.abs(exact - logd))
    print(f"t={t:3d} alpha={alpha:.4f}  PSNR exact {psnr(clean, exact):5.2f} dB"
          f"  log {psnr(clean, logd):5.2f} dB  mean |gap| {gap:.4f}")

# speckle is signal dependent: brighter regions get proportionally more noise
for level in (0.1, 0.2, 0.4):
    flat = corrupt_multiplicative(np.full((128, 128), level), 0.2015, seed=1)
    print(f"level {level:.1f}: noise std {flat.std():.4f} (alpha * level = {0.2015 * level:.4f})")
