"""
Evaluation report
=================

Runs the command-line harness end to end: trains the bundled tiny config,
then evaluates every method over the four standard noise levels and prints
the resulting report. Run from the repository root.
"""
from despeckle import cli

ckpt = cli.cmd_train("configs/tiny_train.json")
print("checkpoint:", ckpt)

report = cli.cmd_evaluate("configs/tiny_eval.json", {"checkpoint": str(ckpt)})
for row in cli.read_report(report):
    print(f"{row['method']:8s} alpha {row['alpha']:>6s}  PSNR {float(row['mean_psnr']):6.2f}"
          f"  SSIM {float(row['mean_ssim']):.3f}  ({row['wall_time_s']} s)")
