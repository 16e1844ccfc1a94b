"""Scratch: strong pretrain, then instrumented adapt showing pseudo-label quality."""
import sys, time
import torch
import attnadapt as aa
from attnadapt.losses import LossWeights
from attnadapt.pipeline import _forward_full
from attnadapt.centroids import pseudo_label_epoch

seed = 0
pre_epochs, pre_lr = int(sys.argv[1]), float(sys.argv[2])
ad_epochs, ad_lr = int(sys.argv[3]), float(sys.argv[4])

t0 = time.time()
src, tgt = aa.gen_domain_pair(aa.DomainSpec(num_classes=5, per_class=100, extent=32, seed=seed))
spec = aa.BlockSpec(num_classes=5)
pre = aa.pretrain_source(src, aa.TrainConfig(epochs=pre_epochs, batch_size=64,
                                             learning_rate=pre_lr, seed=seed),
                         block_spec=spec)
src_acc = aa.evaluate(pre.model, src).accuracy
tgt_acc = aa.evaluate(pre.model, tgt).accuracy
print(f"pretrain({pre_epochs}ep,lr{pre_lr}) {time.time()-t0:.0f}s src={src_acc:.3f} tgt={tgt_acc:.3f}", flush=True)

# instrumented full-method adapt: print pseudo-label accuracy each epoch
model = pre.model
for name, w in [("im", LossWeights(0.0, 0.0)), ("im_ssd", LossWeights(1.0, 0.0)),
                ("im_gac", LossWeights(0.0, 0.5)), ("full", LossWeights(1.0, 0.5))]:
    cfg = aa.TrainConfig(epochs=ad_epochs, batch_size=64, learning_rate=ad_lr,
                         weights=w, seed=seed)
    import copy
    m = copy.deepcopy(model)
    m.head.freeze()
    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad]
    opt = torch.optim.SGD([p for _, p in named], lr=cfg.learning_rate,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    from attnadapt.contrast import MemoryBank, gac_loss, make_views
    from attnadapt.data import normalize
    from attnadapt.losses import im_loss, ssd_loss, total_loss
    bank = aa.MemoryBank(len(tgt), m.spec.latent_dim)
    gen = torch.Generator(); gen.manual_seed(cfg.seed)
    z0, _ = _forward_full(m, tgt.images, cfg.batch_size)
    bank.update(torch.arange(len(tgt)), z0)
    table = None
    m.train()
    for epoch in range(cfg.epochs):
        z_all, logits_all = _forward_full(m, tgt.images, cfg.batch_size)
        pseudo, table = pseudo_label_epoch(z_all, logits_all, table, cfg.smoothing)
        pl_acc = float((pseudo.labels == tgt.labels).float().mean())
        arg_acc = float((logits_all.argmax(1) == tgt.labels).float().mean())
        sums = dict(im=0.0, ce=0.0, kd=0.0, gac=0.0)
        steps = 0
        perm = torch.randperm(len(tgt), generator=gen)
        for s in range(0, len(tgt), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            g_imgs, l_imgs = make_views(normalize(tgt.images[idx]), cfg.crop_fraction)
            gt = m(g_imgs); lt = m(l_imgs)
            im = im_loss(gt.logits)
            ce, kd = ssd_loss(gt.logits, gt.layer_logits, pseudo.labels[idx])
            gac = gac_loss(lt.z, gt.z, idx, bank, cfg.temperature)
            loss = total_loss(im, ce, kd, gac, cfg.weights)
            opt.zero_grad(); loss.backward(); opt.step()
            bank.update(idx, gt.z.detach())
            for k2, v in dict(im=im, ce=ce, kd=kd, gac=gac).items():
                sums[k2] += float(v.detach())
            steps += 1
        print(f"  [{name}] ep{epoch} plab_acc={pl_acc:.3f} argmax_acc={arg_acc:.3f} "
              + " ".join(f"{k2}={v/steps:.3f}" for k2, v in sums.items()), flush=True)
    acc = aa.evaluate(m, tgt).accuracy
    print(f"[{name}] final acc={acc:.3f} ({time.time()-t0:.0f}s)", flush=True)
