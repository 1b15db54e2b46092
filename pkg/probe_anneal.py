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

VARIANTS = {
    "v1": MethodToggles(True, False, False, False, False, False),
    "v3": MethodToggles(True, False, False, False, True, False),
    "v4": MethodToggles(True, True, True, True, False, False),
    "full": MethodToggles(True, True, True, True, True, False),
}

gamma = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
rounds = int(sys.argv[2]) if len(sys.argv) > 2 else 6

tc = TransferConfig(alignment_weight=1.0, epochs=3, batch_size=32)
pc = PromptConfig(length=4, temperature=0.02, init_scale=1e-3)
fc = FederationConfig(rounds=rounds, global_epochs=15, domain_epochs=1,
                      global_lr=3e-3, head_lr=0.01, domain_lr=2e-5,
                      weight_decay=10.0, lr_decay=gamma, batch_size=2000)

def cell(seed, holdout, toggles, shots=0):
    spec = WorldSpec(classes=10, domains=4, samples_per_cell=200,
                     noise=0.1, dim=64, shift_scale=3.0, seed=seed)
    enc = FrozenEncoder(EncoderConfig(dim=64, max_tokens=16, seed=seed))
    world = generate_world(spec, enc)
    split = leave_one_out(world, holdout)
    if shots > 0:
        clients = [few_shot_subsample(ds, shots, seed + 17 * ci)[0]
                   for ci, ds in enumerate(split.clients)]
        split = replace(split, clients=clients)
    s1 = run_stage_one(split, enc, tc, pc.temperature, toggles, seed)
    res = run_protocol(s1, split, enc, pc, fc, toggles, seed)
    return evaluate_accuracy(res, split, enc, pc, toggles)

t0 = time.time()
print(f"gamma={gamma} rounds={rounds}")
means = {}
for name, tg in VARIANTS.items():
    accs = [cell(s, h, tg) for s in range(5) for h in range(4)]
    means[name] = float(np.mean(accs))
    print(f"{name:>4}: mean={means[name]:.4f} std={np.std(accs):.3f} "
          f"min={min(accs):.2f} ({time.time()-t0:.0f}s)", flush=True)
print(f"v1<v3: {means['v1'] < means['v3']} ({means['v3']-means['v1']:+.4f})")
print(f"v4<=full+0.005: {means['v4'] <= means['full'] + 0.005} ({means['full']-means['v4']:+.4f})")
print(f"full>v1: {means['full'] > means['v1']} ({means['full']-means['v1']:+.4f})")

fs = {}
for shots in [1, 4, 16, 0]:
    accs = [cell(s, h, VARIANTS["full"], shots) for s in range(3) for h in range(4)]
    fs[shots] = float(np.mean(accs))
    print(f"shots={shots or 'full':>4} mean={fs[shots]:.4f} std={np.std(accs):.3f} "
          f"({time.time()-t0:.0f}s)", flush=True)
seq = [fs[1], fs[4], fs[16], fs[0]]
bad = [max(0.0, seq[i] - seq[i + 1]) for i in range(3)]
print(f"inversions: {[f'{b:.4f}' for b in bad]}  "
      f"pass={sum(b > 0 for b in bad) <= 1 and max(bad) <= 0.01}")
print(f"total {time.time()-t0:.0f}s")
