"""
From a partial scan to a complete shape
=======================================

Build a small indexed collection, train the cluster classifier on simulated
scans, then hide half of a shape and recover a complete labeled cloud from
what is left.  Takes a few minutes on one core.
"""

from dataclasses import replace

import numpy as np

from boxtemplates.classify import TrainConfig, scan_augmenter, train
from boxtemplates.collection import preprocess_collection
from boxtemplates.fitting import DEFAULT_CMA, FitConfig
from boxtemplates.scansim import occlude_half
from boxtemplates.synthetic import make_collection
from boxtemplates.template import load_template_library
from boxtemplates.transfer import recover_shape

library = load_template_library()
by_name = {t.name: t for t in library}
rng = np.random.default_rng(0)

# a collection of tables and mugs, two styles each
shapes = make_collection([by_name["table"], by_name["mug"]], 8, rng, styles_per_template=2)

# fit every shape, then cluster the fitted parameters per template
quick = FitConfig(restarts=2, cma=replace(DEFAULT_CMA, max_evals=3000), polish_evals=1500)
family = {t.template_id: t.families[0] for t in library}
index = preprocess_collection([(s.shape_id, family[s.template_id], s.cloud) for s in shapes],
                              library, quick, clusters_per_template=2)
print(index.n_clusters, "clusters")

# the classifier sees simulated partial scans, refreshed every epoch
label = {r.shape_id: r.cluster for r in index.records}
augment = scan_augmenter([(s.cloud, label[s.shape_id]) for s in shapes], pool_size=4)
model, hist = train(augment(-1, rng), TrainConfig(epochs=30, augmentation=True),
                    n_classes=index.n_clusters, augment=augment)
print("final training accuracy", hist.accuracy[-1])

# cut a shape in half and recover it
target = shapes[5]
scan = occlude_half(target.cloud, rng)
rec = recover_shape(scan, index, model, k=2, config=FitConfig())
print(f"scan of {target.shape_id}: {len(scan)} of {len(target.cloud)} points kept")
print("identified template", rec.identification.template_id, "source", rec.source_id)
print("residual", round(rec.residual, 4), "recovered points", len(rec.geometry))
