import sys
import time
from dataclasses import replace

import numpy as np

from fedstyle.data import WorldSpec, generate_world, leave_one_out
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
    "v5": MethodToggles(True, True, False, True, True, False),
    "full": MethodToggles(True, True, True, True, True, False),
}

dlr = float(sys.argv[1]) if len(sys.argv) > 1 else 1e-3

tc = TransferConfig(alignment_weight=0.5, epochs=8, batch_size=32)
pc = PromptConfig(length=4, temperature=0.1, init_scale=0.0)
fc = FederationConfig(rounds=10, global_epochs=10, domain_epochs=1,
                      global_lr=3e-3, head_lr=0.01, domain_lr=dlr,
                      weight_decay=0.5, lr_decay=0.7, batch_size=2000)

def world_split(seed, holdout):
    spec = WorldSpec(classes=10, domains=4, samples_per_cell=200,
                     noise=0.1, dim=64, shift_scale=2.5, seed=seed)
    enc = FrozenEncoder(EncoderConfig(dim=64, max_tokens=16, seed=seed))
    world = generate_world(spec, enc)
    return enc, leave_one_out(world, holdout)

t0 = time.time()
enc, split = world_split(0, 0)
for name in ("v1", "v4", "v5", "full"):
    s1 = run_stage_one(split, enc, tc, pc.temperature, V[name], 0)
    res = run_protocol(s1, split, enc, pc, fc, V[name], 0)
    acc = evaluate_accuracy(res, split, enc, pc, V[name])
    dn = [float(np.linalg.norm(d)) for d in res.domain_prompts] if res.domain_prompts is not None else []
    print(f"{name:5s} acc={acc:.4f} |D|={[f'{x:.3f}' for x in dn]}  ({time.time()-t0:.0f}s)")
