import sys
import time
from dataclasses import replace

import numpy as np

from fedstyle.data import WorldSpec, generate_world, leave_one_out, few_shot_subsample
from fedstyle.encoder import EncoderConfig, FrozenEncoder
from fedstyle.prompts import PromptConfig
from fedstyle.style_transfer import TransferConfig
from fedstyle.federation import (
    FederationConfig,
    MethodToggles,
    run_stage_one,
    run_protocol,
    evaluate_accuracy,
)

V = {
    "v1": MethodToggles(True, False, False, False, False, False),
    "v3": MethodToggles(True, False, False, False, True, False),
    "v4": MethodToggles(True, True, True, True, False, False),
    "full": MethodToggles(True, True, True, True, True, False),
}

shift = float(sys.argv[1]) if len(sys.argv) > 1 else 3.0
tau = float(sys.argv[2]) if len(sys.argv) > 2 else 0.05
glr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
wd = float(sys.argv[4]) if len(sys.argv) > 4 else 0.5
dlr = float(sys.argv[5]) if len(sys.argv) > 5 else 1e-3

tc = TransferConfig(alignment_weight=0.5, epochs=5, batch_size=32)
pc = PromptConfig(length=4, temperature=tau, init_scale=1e-3)
fc = FederationConfig(rounds=10, global_epochs=10, domain_epochs=1,
                      global_lr=glr, head_lr=0.01, domain_lr=dlr,
                      weight_decay=wd, lr_decay=0.7, batch_size=2000)

def world_split(seed, holdout, shots=0):
    spec = WorldSpec(classes=10, domains=4, samples_per_cell=200,
                     noise=0.1, dim=64, shift_scale=shift, seed=seed)
    enc = FrozenEncoder(EncoderConfig(dim=64, max_tokens=16, seed=seed))
    world = generate_world(spec, enc)
    split = leave_one_out(world, holdout)
    if shots > 0:
        clients = [few_shot_subsample(ds, shots, seed + 17 * ci)[0]
                   for ci, ds in enumerate(split.clients)]
        split = replace(split, clients=clients)
    return enc, split

def run_cell(enc, split, toggles, pseed):
    s1 = run_stage_one(split, enc, tc, pc.temperature, toggles, pseed)
    res = run_protocol(s1, split, enc, pc, fc, toggles, pseed)
    return evaluate_accuracy(res, split, enc, pc, toggles)

t0 = time.time()
print(f"shift={shift} tau={tau} glr={glr} wd={wd} dlr={dlr}")

# endpoint noise: fixed world, varied protocol seed
enc, split = world_split(0, 0)
for name in ("v1", "full"):
    accs = [run_cell(enc, split, V[name], 100 + j) for j in range(4)]
    print(f"protocol-seed spread {name}: {[f'{a:.4f}' for a in accs]} "
          f"std={np.std(accs):.4f} ({time.time()-t0:.0f}s)", flush=True)

# orderings on the 20-cell grid
means = {}
for name, tg in V.items():
    accs = []
    for seed in range(5):
        enc, split = world_split(seed, 0)
        for holdout in range(4):
            if holdout:
                _, split = world_split(seed, holdout)
            accs.append(run_cell(enc, split, tg, seed))
    means[name] = float(np.mean(accs))
    print(f"{name:>4}: mean={means[name]:.4f} std={np.std(accs):.3f} "
          f"min={min(accs):.2f} ({time.time()-t0:.0f}s)", flush=True)
print(f"v1<v3: {means['v1'] < means['v3']} ({means['v3']-means['v1']:+.4f})")
print(f"v4<=full+0.005: {means['v4'] <= means['full'] + 0.005} ({means['full']-means['v4']:+.4f})")
print(f"full>v1: {means['full'] > means['v1']} ({means['full']-means['v1']:+.4f})")

# few-shot curve, full method
fs = {}
for shots in [1, 4, 16, 0]:
    accs = []
    for seed in range(3):
        for holdout in range(4):
            enc, split = world_split(seed, holdout, shots)
            accs.append(run_cell(enc, split, V["full"], seed))
    fs[shots] = float(np.mean(accs))
    print(f"shots={shots or 'full':>4} mean={fs[shots]:.4f} std={np.std(accs):.3f} "
          f"({time.time()-t0:.0f}s)", flush=True)
seq = [fs[1], fs[4], fs[16], fs[0]]
bad = [max(0.0, seq[i] - seq[i + 1]) for i in range(3)]
print(f"inversions: {[f'{b:.4f}' for b in bad]} "
      f"pass={sum(b > 0 for b in bad) <= 1 and max(bad) <= 0.01}")
print(f"total {time.time()-t0:.0f}s")
