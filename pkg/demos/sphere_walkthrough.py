"""Walk through the whole pipeline on the synthetic sphere, in process.

Builds the scene, perturbs the ground-truth field, trains it for a few hundred
iterations, screens it against the root masks, extracts a mesh and scores it.
Small settings keep it to a couple of minutes on one core; the acceptance
suite runs the same path at full size through the CLI.

    python3 demos/sphere_walkthrough.py [iterations]
"""
import sys
import time

import numpy as np

from mgf import evaluate, extract, mask_field, render, synth, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
t0 = time.time()

scene = synth.synth_scene("sphere", seed=0, n_views=12, n_heldout=2, size=48)
views, targets = scene.views("train"), scene.target_images("train")
print(f"{len(views)} training views, {len(scene.gt_field)} ground-truth Gaussians")

# 5% relative noise on every parameter group
init = synth.perturb(scene.gt_field, 0.05, None, seed=0)


def heldout_psnr(fld):
    scores = [evaluate.score_render(render.render_image(fld, v).color, t, v.pyramid.inside)
              for v, t in zip(scene.views("heldout"), scene.target_images("heldout"))]
    return np.mean([s.psnr for s in scores]), np.mean([s.ssim for s in scores])


print("held-out PSNR/SSIM before training: %.2f dB / %.4f" % heldout_psnr(init))
cfg = train.TrainConfig(iterations=iterations, seed=0)
result = train.fit(views, targets, cfg, init)
print("held-out PSNR/SSIM after %d iterations: %.2f dB / %.4f" % (iterations, *heldout_psnr(result.field)))
last = result.history[-1]
print(f"final total loss {last.total:.5f} (mlpm {last.mlpm:.5f}, boundary {last.boundary:.5f})")

# screening uses only the root views, as the masks of child views come later
sel = mask_field.select_roots([v.image for v in views], 0.2)
roots = [v for v in views if v.image.image_id in sel.root_ids]
screened, keep = extract.screen_gaussians(result.field, roots)
print(f"screening kept {keep.sum()} of {len(keep)} Gaussians using {len(roots)} roots")

mesh, grid = extract.extract_mesh(screened, views, mode="delaunay")
closed, oriented = extract.edge_manifold_report(mesh)
print(f"{len(grid.tets)} tetrahedra -> {len(mesh.triangles)} triangles, closed={closed}, oriented={oriented}")

gt_pts = evaluate.sample_mesh(scene.gt_mesh, 50000, seed=1)
pred_pts = evaluate.sample_mesh(mesh, 50000, seed=2)
score = evaluate.mesh_score(pred_pts, gt_pts, 0.02)
print(f"accuracy {score.accuracy:.2f}  completeness {score.completeness:.2f}  F1 {score.f1:.2f}  (Th = 0.02)")
print(f"done in {time.time() - t0:.0f}s")
