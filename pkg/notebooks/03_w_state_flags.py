"""
W states and the flag ensembles
===============================

The W construction leaves a flag excitation in C_k that records which
party holds the W excitation.  The W correlation properties look
different depending on what happens to those flags.
"""

# %%
from heraldsim.belltest import mermin_value, w_all_equal_probability, w_property_probabilities, w_setup
from heraldsim.protocols import ChannelPhases

setup = w_setup(ChannelPhases((0.2, 0.5, 0.9), 0.3, 1.3))

# %% [markdown]
# * ``abstract``: flags disentangled coherently (ideal qubit model)
# * ``erase``: flags mixed on a balanced multiport and detected, with a
#   feed-forward phase per outcome
# * ``trace``: flags left alone, so they decohere the superposition

# %%
for flag in ("abstract", "erase", "trace"):
    p = w_property_probabilities(setup, "exact", flag)
    eq = w_all_equal_probability(setup, "exact", flag)
    m = mermin_value(setup, "Z", "X", "exact", flag)
    print(
        f"{flag:8s}  P(two z=-1)={p.two_minus.value:.3f}  P(x_j=x_k|z_i=-1)={p.conditional_jk.value:.3f}"
        f"  P(all equal)={eq.value:.3f}  Mermin={m.value:+.3f}"
    )
    for note in p.notes:
        print("          note:", note)

# %% [markdown]
# Sampling the erasure run converges to the coherent value.

# %%
mc = w_all_equal_probability(setup, "montecarlo", "erase", shots=40_000, seed=3)
print(f"P(all equal) = {mc.value:.4f} +- {mc.stderr:.4f}")
