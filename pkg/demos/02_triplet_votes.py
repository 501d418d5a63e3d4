# %% [markdown]
# # How the teachers vote on triplets
#
# Each draw picks three distinct batch positions (anchor, first pick, second
# pick). Every teacher compares anchor distances in its own hidden space and
# votes; a majority saying the first pick is farther swaps the two, so the
# closer sample becomes the positive.

# %%
import numpy as np

from mlkd import generate_triplets
from mlkd.triplets import squared_euclidean

rng = np.random.default_rng(0)
hiddens = [rng.normal(size=(6, w)) for w in (16, 32, 16)]
draws = [rng.choice(6, size=3, replace=False) for _ in range(4)]

for a, p, q in draws:
    votes = ["+1" if squared_euclidean(h[a], h[p]) > squared_euclidean(h[a], h[q]) else "-1" for h in hiddens]
    print(f"draw ({a},{p},{q}) votes {votes}")

# %% [markdown]
# The library does the same with the generator state it is handed. Replaying
# the stream from the same seed gives the same draws, so the result can be
# compared with the loop above.

# %%
rng = np.random.default_rng(0)
_ = [rng.normal(size=(6, w)) for w in (16, 32, 16)]  # consume the same draws as the hidden states
for t in generate_triplets(hiddens, rng, n=4):
    print(t)

# %% [markdown]
# Only the ordering of distances matters, so plain Euclidean distance gives
# identical triplets.

# %%
same = generate_triplets(hiddens, np.random.default_rng(9), "squared_euclidean")
also = generate_triplets(hiddens, np.random.default_rng(9), "euclidean")
print("identical:", same == also)
