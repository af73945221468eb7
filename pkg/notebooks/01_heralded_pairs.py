"""
Heralded pairs between two ensembles
====================================

Two weak Raman pulses, one 50/50 mixer and a single click.  We look at
how good the heralded state is, and what the weak-pulse condition buys.
"""

# %%
import math

from heraldsim.fock import reduced_fidelity
from heraldsim.optics import DetectorModel
from heraldsim.protocols import ExcitationParams, ideal_pair, prepare_pair

# %% [markdown]
# A click on the first Stokes detector leaves the ensembles in
# (S_L^dag + e^{i(phi + pi/2)} S_R^dag)|vac>/sqrt(2); the second detector
# gives phi - pi/2.  Either way the phase is known, so it can be compensated.

# %%
res = prepare_pair(phi=0.3, params=ExcitationParams(1e-3))
target = ideal_pair(("L", "R"), res.effective_phase)
print("click pattern      ", res.click_pattern)
print("herald probability ", res.probability)
print("fidelity           ", reduced_fidelity(target, res.state))

# %% [markdown]
# Double excitations enter at first order in p_c: cutting p_c tenfold cuts
# the infidelity tenfold, and the herald rate with it.

# %%
for p in (1e-2, 1e-3, 1e-4):
    r = prepare_pair(0.0, ExcitationParams(p))
    inf = 1 - reduced_fidelity(ideal_pair(("L", "R"), r.effective_phase), r.state)
    print(f"p_c={p:7.0e}  herald={r.probability:.3e}  infidelity={inf:.3e}  attempts~{1 / r.probability:,.0f}")

# %% [markdown]
# Detector loss lowers the rate but hardly the fidelity; dark counts herald
# vacuum and do hurt.

# %%
for loss, dark in ((0.0, 0.0), (0.5, 0.0), (0.0, 1e-4), (0.0, 1e-3)):
    r = prepare_pair(0.0, ExcitationParams(1e-3), DetectorModel(loss, dark))
    f = reduced_fidelity(ideal_pair(("L", "R"), r.effective_phase), r.state)
    print(f"loss={loss:.1f} dark={dark:.0e}  herald={r.probability:.3e}  fidelity={f:.6f}")
