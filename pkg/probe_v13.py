import sys
import time

import numpy as np

from fedstyle.data import WorldSpec, generate_world, leave_one_out
from fedstyle.encoder import EncoderConfig, FrozenEncoder
from fedstyle.prompts import PromptConfig
from fedstyle.style_transfer import TransferConfig, audit_bank_entry
from fedstyle.federation import (
    FederationConfig,
    MethodToggles,
    run_stage_one,
    run_protocol,
    evaluate_accuracy,
)

V1 = MethodToggles(True, False, False, False, False, False)
V3 = MethodToggles(True, False, False, False, True, False)

ep = int(sys.argv[1])
aw = float(sys.argv[2])
tlr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

tc = TransferConfig(alignment_weight=aw, learning_rate=tlr, epochs=ep, batch_size=32)
pc = PromptConfig(length=4, temperature=0.1, init_scale=0.0)
fc = FederationConfig(rounds=10, global_epochs=10, domain_epochs=1,
                      global_lr=3e-3, head_lr=0.01, domain_lr=1e-3,
                      weight_decay=0.5, lr_decay=0.7, batch_size=2000)

t0 = time.time()
gaps = []
sims = []
a1 = []
a3 = []
for seed in (0, 1):
    spec = WorldSpec(classes=10, domains=4, samples_per_cell=200,
                     noise=0.1, dim=64, shift_scale=2.5, seed=seed)
    enc = FrozenEncoder(EncoderConfig(dim=64, max_tokens=16, seed=seed))
    world = generate_world(spec, enc)
    for holdout in range(4):
        split = leave_one_out(world, holdout)
        s1a = run_stage_one(split, enc, tc, pc.temperature, V1, seed)
        r1 = run_protocol(s1a, split, enc, pc, fc, V1, seed)
        acc1 = evaluate_accuracy(r1, split, enc, pc, V1)
        s1b = run_stage_one(split, enc, tc, pc.temperature, V3, seed)
        r3 = run_protocol(s1b, split, enc, pc, fc, V3, seed)
        acc3 = evaluate_accuracy(r3, split, enc, pc, V3)
        gaps.append(acc3 - acc1)
        a1.append(acc1)
        a3.append(acc3)
        if holdout == 0:
            pool = s1b.clients[0].train_pool
            aug = pool.subset(np.flatnonzero(pool.augmented))
            j = int(aug.domains[0])
            first = aug.subset(np.flatnonzero(aug.domains == j)[:200])
            ref = next(c.local_set for c in s1b.clients if c.local_set.domains[0] == j)
            audit = audit_bank_entry(first, ref)
            sims.append(audit["mean_similarity"])
print(f"ep={ep} aw={aw} tlr={tlr}: v1={np.mean(a1):.4f} v3={np.mean(a3):.4f} "
      f"gap={np.mean(gaps):+.4f} cells +{sum(g>0 for g in gaps)}/-{sum(g<0 for g in gaps)} "
      f"sim={np.mean(sims):.4f} ({time.time()-t0:.0f}s)")
