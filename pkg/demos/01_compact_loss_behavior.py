"""Why the compact constraint prefers blocks over strips and scatter.

The mask penalty convolves a 7x7 binary mask (0 = masked) with a 3x3
zero-sum kernel (center 1, neighbors -1/8) and sums the positive part.
For masks away from the border this is proportional to the exposed
perimeter of the masked region, so at equal area a square block is
cheapest and isolated cells are most expensive.

Run:  python3 demos/01_compact_loss_behavior.py
"""

import numpy as np

from aofd.losses import COMPACT_KERNEL, compact_loss


def show(name, mask):
    rect = compact_loss(mask, mode="rectified")
    lit = compact_loss(mask, mode="literal")
    grid = "\n".join("  " + "".join(".#"[int(v == 0)] for v in row) for row in mask)
    print(f"{name}  (masked cells = {int((mask == 0).sum())})")
    print(grid)
    print(f"  rectified = {rect:.4f}   literal = {lit:.4f}\n")


print("kernel (sums to zero):")
print(COMPACT_KERNEL, "\n")

block = np.ones((7, 7))
block[2:4, 2:4] = 0
show("2x2 block", block)

strip = np.ones((7, 7))
strip[3, 1:5] = 0
show("1x4 strip", strip)

scatter = np.ones((7, 7))
for r, c in ((1, 1), (1, 5), (5, 1), (5, 5)):
    scatter[r, c] = 0
show("four isolated cells", scatter)

print("Ordering at equal area: scattered > strip > block.")
print("The literal (signed) sum is 0 for interior masks -- the kernel sums")
print("to zero, so only border clipping can make it nonzero. That is why")
print("the rectified form is the default.")
