"""
Choosing between templates
==========================

A family may offer several templates.  Every candidate is fitted and the
lowest energy wins, so a four-legged chair should not be explained by the
swivel chair or the table.
"""

import numpy as np

from boxtemplates.fitting import FitConfig, select_template
from boxtemplates.synthetic import make_shape
from boxtemplates.template import load_template_library

library = {t.name: t for t in load_template_library()}
candidates = [library[n] for n in ("chair_4leg", "chair_swivel", "table")]

shape = make_shape(library["chair_4leg"], np.random.default_rng(3))
best, ranked = select_template(shape.cloud, candidates, FitConfig())

# ranked holds every fit, lowest energy first
names = {t.template_id: t.name for t in candidates}
for r in ranked:
    print(f"{names[r.template_id]:14s} {r.e_total:.5f}")
print("chosen:", names[best.template_id])
