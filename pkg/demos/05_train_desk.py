# Train the halved-width model on 2,000 rotated digits and evaluate on 2,000
# more. About 15 minutes on one CPU core; pass a smaller epoch count as the
# first argument for a quicker look.

import sys

from steerfft.checkpoint import save_checkpoint
from steerfft.data import load_dataset
from steerfft.model import SteerableNet, desk_config
from steerfft.train import desk_train_config, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
train_set, test_set = load_dataset(n_train=2000, n_test=2000)
model = SteerableNet(desk_config())
print(f"{model.num_parameters():,} parameters, {len(train_set)} training images")
result = train(model, train_set, test_set, desk_train_config(epochs=epochs), metrics_path="desk_metrics.csv", log=print)
save_checkpoint("desk.ckpt", model, desk_train_config(epochs=epochs))
print(f"final test error {result.final_test_error:.2%}")
