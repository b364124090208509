# Desk-scale run: pretrain MoCo on synthetic grasps, then probe frozen features.
# EPOCHS=50 reproduces the acceptance run (a few minutes on one core); default is quick.
import os
import tempfile

from tactile_moco import dataio as D
from tactile_moco import evalsuite as S
from tactile_moco import trainer as TR

epochs = int(os.environ.get("EPOCHS", "5"))
root = tempfile.mkdtemp(prefix="desk_")
train_set = D.load_dataset(D.generate_synthetic(512, 64, seed=7, out_dir=f"{root}/train"))
test_set = D.load_dataset(D.generate_synthetic(256, 64, seed=1007, out_dir=f"{root}/test"))

cfg = TR.TrainConfig(method="moco", epochs=epochs)  # K=256, m=0.999, tau=0.07, batch 32
result = TR.train(train_set, cfg)
for epoch, loss in result.epoch_losses().items():
    print(f"epoch {epoch:3d}  loss {loss:.4f}")  # ln(257) = 5.549 is the chance level

tr = S.extract_features(result.checkpoint, train_set)
te = S.extract_features(result.checkpoint, test_set)
rows = [("moco", p, S.run_probe(tr, te, S.ProbeConfig(probe=p))) for p in S.PROBES]
print(S.report(rows))  # kNN uses k = floor(sqrt(512)) = 22
