"""A short walk through the mask metrics on hand-made shapes.

Run:  python demos/01_metrics_tour.py
"""

import numpy as np

from xview.masks import (BinaryMask, contour_accuracy, iou, location_error, rle_encode,
                         summarize, visibility_accuracy)

size = 32
yy, xx = np.mgrid[0:size, 0:size]

# a disc and a square of similar area
disc = BinaryMask((xx - 12) ** 2 + (yy - 12) ** 2 <= 6 ** 2)
square = BinaryMask((abs(xx - 12) <= 5) & (abs(yy - 12) <= 5))
print("disc area", disc.area(), "square area", square.area())

# IoU rewards overlap, LE only looks at centroids
print(f"IoU(disc, square)           = {iou(disc, square):.3f}")
print(f"LE(disc, square)            = {location_error(disc, square):.3f}")

# moving the disc lowers IoU and raises LE, but CA aligns centroids first,
# so pure translation leaves the contour score untouched
moved = disc.translate(9, 6)
print(f"IoU(disc, moved disc)       = {iou(disc, moved):.3f}")
print(f"LE(disc, moved disc)        = {location_error(disc, moved):.3f}")
print(f"CA(disc, moved disc)        = {contour_accuracy(moved, disc):.3f}")
bar = BinaryMask((abs(xx - 12) <= 10) & (abs(yy - 12) <= 2))
print(f"CA(square, disc)            = {contour_accuracy(square, disc):.3f}  (1 px tolerance)")
print(f"CA(bar, disc)               = {contour_accuracy(bar, disc):.3f}")

# run-length encoding in row-major order, background run first
row = BinaryMask([[0, 1, 1, 1], [1, 0, 0, 0]])
print("RLE of", row.bits.astype(int).tolist(), "->", rle_encode(row).runs)

# visibility: predicted visible when the mask has at least theta_vis pixels
print("VA:", visibility_accuracy([True, False, True, False], [True, True, False, False]))

# a small evaluation set, aggregated the way the trainer reports it
empty = BinaryMask.empty(size, size)
report = summarize([disc, moved, empty, square], [disc, disc, empty, empty])
print(report.to_json())
