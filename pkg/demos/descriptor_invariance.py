"""
A descriptor that ignores pose
==============================

Five fruit centroids are hashed, then moved, rotated and rescaled. The
hash does not change, and comparing the two canonical frames recovers the
motion that separates them.
"""
import numpy as np

from constel import canonical_frame, describe
from constel.starhash import induced_transform
from constel.geom import SimilarityTransform, random_rotation

rng = np.random.default_rng(4)

##############################################################################
# Five points, roughly the spread of fruit on one branch (metres).
P = rng.uniform(0.0, 0.4, size=(5, 3))
d = describe(P)
print("code length:", d.code.size, "(three coordinates per non-anchor point)")
print(np.round(d.code.reshape(-1, 3), 4))

##############################################################################
# Apply an arbitrary similarity transform and hash again.
T = SimilarityTransform(random_rotation(rng), np.array([3.0, -1.0, 2.0]), 2.5)
moved = T.apply(P)
print("max code change after transform:", np.abs(describe(moved).code - d.code).max())

##############################################################################
# The pair of canonical frames gives back T itself.
T_hat = induced_transform(canonical_frame(P), canonical_frame(moved))
print("recovered scale:", round(T_hat.scale, 12))
print("recovered translation:", np.round(T_hat.translation, 12))
print("rotation matches:", np.allclose(T_hat.rotation, T.rotation))
