import numpy as np

from leukonet.model import LR_GROUPS, ModelConfig, build_model, forward
from leukonet.training import LRSchedule, lr_at

# # The toy SE-ResNeXt
#
# The default config is small enough to train on a laptop CPU in about a
# minute per run.

model = build_model(ModelConfig.toy(), 0)
n_params = sum(p.data.size for p in model.params.values())
print("parameters:", n_params)

batch = np.random.default_rng(1).random((4, 3, 64, 64))
logits = forward(model, batch, mode="eval")
print("logits:", logits.data.ravel())

# ## Parameter groups
#
# Each parameter belongs to one learning-rate group. Early stages move slowly
# and the classifier head moves fastest.

counts = {g: 0 for g in LR_GROUPS}
for name in model.params:
    counts[model.group_of(name)] += model.params[name].data.size
for g in LR_GROUPS:
    print(f"{g:7s} {counts[g]:6d} params")

schedule = LRSchedule()
for epoch in range(6):
    print(epoch, [lr_at(schedule, epoch, g) for g in LR_GROUPS])
