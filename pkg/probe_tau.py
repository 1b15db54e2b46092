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
from fedstyle.numerics import softmax

V = {
    "v1": MethodToggles(True, False, False, False, False, False),
    "v3": MethodToggles(True, False, False, False, True, False),
    "v4": MethodToggles(True, True, True, True, False, False),
    "full": MethodToggles(True, True, True, True, True, False),
}

glr = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-3
wd = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
tep = int(sys.argv[3]) if len(sys.argv) > 3 else 20
cells = sys.argv[4:] or ["2.0:0.1", "2.0:0.15", "2.0:0.2", "2.5:0.1", "2.5:0.15", "2.5:0.2"]

def world_split(shift, seed, holdout, shots=0):
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

t0 = time.time()
for cell in cells:
    shift, tau = (float(x) for x in cell.split(":"))
    tc = TransferConfig(alignment_weight=0.5, epochs=tep, batch_size=32)
    pc = PromptConfig(length=4, temperature=tau, init_scale=0.0)
    fc = FederationConfig(rounds=10, global_epochs=10, domain_epochs=1,
                          global_lr=glr, head_lr=0.01, domain_lr=1e-3,
                          weight_decay=wd, lr_decay=0.7, batch_size=2000)

    def run_cell(enc, split, toggles, pseed):
        s1 = run_stage_one(split, enc, tc, pc.temperature, toggles, pseed)
        res = run_protocol(s1, split, enc, pc, fc, toggles, pseed)
        return evaluate_accuracy(res, split, enc, pc, toggles)

    base_vals = []
    for s in range(3):
        for h in range(4):
            enc, split = world_split(shift, s, h)
            zero = np.zeros((4, 64))
            text = enc.encode_class_texts([zero, zero], split.class_tokens)
            xn = split.test_set.embeddings / np.linalg.norm(
                split.test_set.embeddings, axis=1, keepdims=True)
            probs = np.stack([softmax(text @ v, temperature=tau) for v in xn])
            base_vals.append(float(np.mean(np.argmax(probs, axis=1) == split.test_set.labels)))
    base = float(np.mean(base_vals))

    means = {}
    for name, tg in V.items():
        accs = []
        for s in range(5):
            for h in range(4):
                enc, split = world_split(shift, s, h)
                accs.append(run_cell(enc, split, tg, s))
        means[name] = float(np.mean(accs))

    fs = {}
    for shots in [1, 4, 16, 0]:
        accs = []
        for s in range(3):
            for h in range(4):
                enc, split = world_split(shift, s, h, shots)
                accs.append(run_cell(enc, split, V["full"], s))
        fs[shots] = float(np.mean(accs))
    seq = [fs[1], fs[4], fs[16], fs[0]]
    bad = [max(0.0, seq[i] - seq[i + 1]) for i in range(3)]
    o1 = means["v1"] < means["v3"]
    o2 = means["v4"] <= means["full"] + 0.005
    o3 = means["full"] > means["v1"]
    fpass = sum(b > 0 for b in bad) <= 1 and max(bad) <= 0.01
    print(f"shift={shift} tau={tau}: base={base:.3f} v1={means['v1']:.4f} "
          f"v3={means['v3']:.4f} v4={means['v4']:.4f} full={means['full']:.4f}", flush=True)
    print(f"  ord {o1}({means['v3']-means['v1']:+.3f}) {o2}({means['full']-means['v4']:+.3f}) "
          f"{o3}({means['full']-means['v1']:+.3f})  "
          f"fs {seq[0]:.3f}->{seq[1]:.3f}->{seq[2]:.3f}->{seq[3]:.3f} "
          f"inv={[f'{b:.3f}' for b in bad]} pass={fpass} ({time.time()-t0:.0f}s)", flush=True)
