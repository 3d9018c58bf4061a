"""End-to-end patch attack: train a victim, optimize a patch, measure ASR.

Trains the toy classifier on canonical crops plus synthetic scene crops,
optimizes an expectation-over-transforms patch against the octagon class,
and compares attack success rate against a random-noise patch of the
same size on held-out placements.

Usage: python demos/03_attack_pipeline.py
"""

import time

import numpy as np

from reapkit import attack, metrics, model, render, signs

rng = np.random.default_rng(0)

# victim: canonical crops for every class + random-background crops
pairs = [(signs.canonical_sign(c), signs.class_index(c))
         for c in signs.CLASS_NAMES if c != signs.BACKGROUND_CLASS]
scenes = []
for c in signs.CLASS_NAMES:
    if c == signs.BACKGROUND_CLASS:
        continue
    for _ in range(4):
        s = attack.synthetic_scene(c, rng)
        scenes.append(s)
        obj = s.objects[0]
        pairs.append((render.extract_crop(s.image, obj.transform),
                      signs.class_index(c)))
for _ in range(8):
    coarse = rng.uniform(0.1, 0.9, (8, 8, 3))
    bg = np.repeat(np.repeat(coarse, 8, axis=0), 8, axis=1)
    pairs.append((bg, signs.class_index(signs.BACKGROUND_CLASS)))

victim = model.train_toy(pairs, epochs=200, seed=0)
print(f"victim clean accuracy: {model.accuracy(victim, pairs):.2f}")

cfg = attack.AttackConfig(algorithm="dpatch", optimizer="pgd",
                          patch_size="medium", iterations=400, seed=0)
eot = attack.EotConfig()
train_scenes = [attack.synthetic_scene("octagon", np.random.default_rng(7 + i))
                for i in range(5)]

t0 = time.time()
patch, trace = attack.generate_patch(train_scenes, "octagon", cfg, eot, victim)
print(f"optimized patch in {time.time() - t0:.0f}s, "
      f"loss {trace[0]:.3f} -> {trace[-1]:.3f}")

random_patch = render.make_patch("octagon", "medium")
held_rng = np.random.default_rng(500)
for label, p in [("optimized", patch), ("random", random_patch)]:
    recs = attack.synthetic_benchmark("octagon", 30, cfg, eot, victim,
                                      np.random.default_rng(321), patch=p)
    print(f"{label:9s} patch: ASR {metrics.asr(recs):.2f} "
          f"over {len(recs)} placements")
