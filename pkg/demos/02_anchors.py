"""Anchor library: selection against a support set, then static vs. dynamic matching."""
import numpy as np

from artifact import anchors, harness
from artifact.indicators import CHANNELS, IndicatorMatrix

D = 64
candidates, supports, planted = harness.toy_library_inputs(D, seed=0)
lib = anchors.build_library(candidates, supports)

hits = sum(lib[ch].pair is candidates[ch][planted[ch]] for ch in CHANNELS)
print(f"selected the planted candidate on {hits}/18 channels")
print("example anchor:", lib[("mouth", "blur")].pair.fake_text)

# static matching ranks channels by indicator anomaly
anomaly = np.zeros(18)
anomaly[CHANNELS.index(("mouth", "blur"))] = 6.0
anomaly[CHANNELS.index(("cheeks", "color"))] = 4.0
mtx = IndicatorMatrix(np.zeros(18), anomaly=anomaly)
print("\nstatic, fake :", [m.anchor.channel for m in anchors.match_static(mtx, lib, "fake", 3)])
print("static, real :", [m.anchor.channel for m in anchors.match_static(mtx, lib, "real", 3)])

# dynamic matching ranks by cosine with a feature; a feature near an anchor retrieves it
feature = lib[("eyes", "texture")].pair.fake_embedding + 0.1 * np.random.default_rng(1).standard_normal(D)
print("\ndynamic, fake:", [m.anchor.channel for m in anchors.match_dynamic(feature, lib, "fake", 3)])
# at test time the label is unknown; the closer polarity wins
print("unlabeled    :", [m.text for m in anchors.match_unlabeled(feature, lib, 2)])
