"""Scratch experiment: measure the four-config ablation trend on one seed."""
import sys, time
import torch
import attnadapt as aa
from attnadapt.losses import LossWeights

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
pre_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 20
ad_epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 12
pre_lr = float(sys.argv[4]) if len(sys.argv) > 4 else 0.02
ad_lr = float(sys.argv[5]) if len(sys.argv) > 5 else 0.005

t0 = time.time()
src, tgt = aa.gen_domain_pair(aa.DomainSpec(num_classes=5, per_class=100, extent=32, seed=seed))
spec = aa.BlockSpec(num_classes=5)
pre_cfg = aa.TrainConfig(epochs=pre_epochs, batch_size=64, learning_rate=pre_lr, seed=seed)
pre = aa.pretrain_source(src, pre_cfg, block_spec=spec)
src_acc = aa.evaluate(pre.model, src).accuracy
tgt_acc = aa.evaluate(pre.model, tgt).accuracy
print(f"[seed {seed}] pretrain {time.time()-t0:.0f}s src_acc={src_acc:.3f} tgt_acc={tgt_acc:.3f} gap={100*(src_acc-tgt_acc):.1f}")

variants = {
    "im":     LossWeights(alpha=0.0, beta=0.0),
    "im_ssd": LossWeights(alpha=1.0, beta=0.0),
    "im_gac": LossWeights(alpha=0.0, beta=0.5),
    "full":   LossWeights(alpha=1.0, beta=0.5),
}
for name, w in variants.items():
    t1 = time.time()
    cfg = aa.TrainConfig(epochs=ad_epochs, batch_size=64, learning_rate=ad_lr,
                         weights=w, seed=seed)
    res = aa.adapt(pre.model, tgt, cfg)
    acc = aa.evaluate(res.model, tgt).accuracy
    print(f"[seed {seed}] {name:7s} acc={acc:.3f} (+{100*(acc-tgt_acc):.1f}) {time.time()-t1:.0f}s")
print(f"[seed {seed}] total {time.time()-t0:.0f}s")
