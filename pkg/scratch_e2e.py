"""Scratch: end-to-end planted pipeline at small scale."""
import time
import numpy as np

from hpm.detection import detect, localize_in_box
from hpm.evaluate import detection_pr, localization_metrics, occlusion_pr
from hpm.features import load_image
from hpm.supervision import load_manifest
from hpm.synthetic import generate_planted_dataset
from hpm.training import TrainingConfig, train

t0 = time.time()
data = generate_planted_dataset("/tmp/planted_small", n_train=40, n_test=15, n_negatives=8,
                                occlusion_rate=0.4, seed=1)
world = data["world"]
print(f"dataset generated in {time.time()-t0:.1f}s")

cfg = TrainingConfig(
    C=0.002, margin_scale=0.5, rounds=4, per_image_cap=10,
    seed=0, virtual_positives=8, canonical_ipd=world.ipd,
    cell_size=4, template_cells=5, n_shapes=3, n_occlusions=4,
    levels_per_octave=3, tolerance=1e-6, max_passes=3000,
)

faces = load_manifest(data["train_manifest"])
t0 = time.time()
bundle, supervision, logs = train(
    faces, data["negatives"], world.references(), world.topology, cfg,
    image_dir=data["image_root"],
)
print(f"trained in {time.time()-t0:.1f}s; rounds: {[r['round'] for r in logs]}")
for r in logs:
    print("  round", r["round"], "objective %.4f" % r["objective"],
          "constraints", r["constraints"], "new", r["new_violations"])

model = bundle["hires"]
test_faces = load_manifest(data["test_manifest"])

t0 = time.time()
preds, gts, pf, gf = [], [], [], []
import os
for face in test_faces:
    img = load_image(os.path.join(data["image_root"], face.image))
    try:
        det = localize_in_box(bundle, img, face.box, min_overlap=0.7,
                              levels_per_octave=3, rotations=(0.0,))
    except Exception as e:
        print("  localize failed:", face.image, e)
        continue
    preds.append(det.landmarks); gts.append(face.landmarks)
    pf.append(det.occluded); gf.append(face.occluded)
print(f"localized {len(preds)}/{len(test_faces)} in {time.time()-t0:.1f}s")

rep = localization_metrics(np.stack(preds), np.stack(gts), world.eye_right, world.eye_left)
print("mean err %.4f  SR@0.1 %.3f" % (rep.mean_error, rep.success_rate))
prec, rec = occlusion_pr(np.concatenate(pf), np.concatenate(gf))
f1 = 2 * prec * rec / max(prec + rec, 1e-9)
print("occlusion P %.3f R %.3f F1 %.3f" % (prec, rec, f1))

# quick detection AP
t0 = time.time()
dets_per, boxes_per, occ_per = [], [], []
for face in test_faces:
    img = load_image(os.path.join(data["image_root"], face.image))
    dets = detect(bundle, img, threshold=-0.5, levels_per_octave=3, rotations=(0.0,))
    dets_per.append(dets)
    boxes_per.append([face.box])
    occ_per.append([bool(face.occluded.any())])
pr = detection_pr(dets_per, boxes_per, occ_per, iou=0.5)
print(f"detection in {time.time()-t0:.1f}s  AP %.3f counts {pr.counts}" % pr.average_precision)
