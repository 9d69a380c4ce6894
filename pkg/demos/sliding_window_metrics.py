"""How the three sliding-window aggregators read the same prediction.

A perfect prediction of a small class-1 object still scores differently
under min, mean and max: windows anchored near the bottom-right edge of
the box reach into the class-4 background, which pulls their means up.
"""

import numpy as np

from aerodepth.datagen import AnnotatedFrame, BBox, build_mask
from aerodepth.metrics import SlidingWindowCfg, kernel_means, sliding_window_classes, threshold_accuracy


def show(title, pred, box, gt_class):
    classes = sliding_window_classes(pred, box)
    marks = ", ".join(f"{agg}={cls}{'' if cls == gt_class else ' (wrong)'}" for agg, cls in classes.items())
    print(f"{title}: {marks}")


def main():
    box = BBox(20, 20, 12, 12)
    frame = AnnotatedFrame("demo", box, 300.0, "plane")
    gt = build_mask(frame, (64, 64)).astype(np.float64)
    gt_class = int(gt[box.y, box.x])
    print(f"object at {box}, class {gt_class}, background class {int(gt[0, 0])}")

    means = kernel_means(gt, box, SlidingWindowCfg(k=5))
    print(f"kernel means over the box: min {means.min():.2f}, mean {means.mean():.2f}, max {means.max():.2f}")
    show("ground truth as prediction", gt, box, gt_class)

    rng = np.random.default_rng(0)
    noisy = gt + rng.normal(0, 0.3, gt.shape)
    show("ground truth plus noise", noisy, box, gt_class)
    print(f"threshold accuracy of the noisy map: {threshold_accuracy(noisy, gt):.3f}")

    shifted = gt + 0.6
    show("everything 0.6 too far", shifted, box, gt_class)


if __name__ == "__main__":
    main()
