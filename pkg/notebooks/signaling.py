# %% [markdown]
# # Signaling example
#
# X holds independent ±1 values and Y says whether the value at position n is
# positive. A mask that keeps the maximum when Y = 0 and the minimum when
# Y = 1 carries the label in the kept value, yet never points at position n.
# The label-consistency objective has no reason to prefer that mask.

# %%
import json
from pathlib import Path

import numpy as np

from ibts import classifier as C
from ibts import datagen, metrics
from ibts import explainer as E

preset = json.loads((Path(__file__).resolve().parent.parent / "configs" / "signaling_desk.json").read_text())
seed = preset["seeds"][0]
ds = datagen.generate(datagen.GeneratorConfig(**{**preset["dataset"], "seed": seed}))
X, Y, Q = ds.split("test")

# %% [markdown]
# The hand-built signaling mask. Its kept value equals 1 - 2Y, so it encodes
# the label perfectly while missing the true position.

# %%
flat = X.reshape(len(X), -1)
pick = np.where(Y == 0, flat.argmax(1), flat.argmin(1))
hand = np.zeros_like(flat)
hand[np.arange(len(X)), pick] = 1.0
hand = hand.reshape(X.shape)
print("kept value vs label:", np.unique(flat[np.arange(len(X)), pick] + 2 * Y - 1))
print("hand mask AUP/AUR", metrics.aup_aur(hand, Q))

# %%
model, report = C.train_classifier(C.ClassifierConfig(**preset["classifier"], seed=seed), ds)
model.freeze()
ex, _ = E.train_explainer(model, ds, E.ExplainerConfig(**preset["explainer"], seed=seed))
art = E.explain(ex, X)
print("classifier F1", round(report.test_f1, 3))
print(metrics.saliency_report(art.pi, Q))
print("mean keep probability by position", np.round(art.pi[:, :, 0].mean(0), 2))
