"""The convolutional feature extractor: how a 6x13 flow matrix becomes a
128-dimensional representation.

Run: python demos/02_cnn_backbone.py
"""

from flowmoe import CnnBackbone, RngState, Tensor, count_parameters

rng = RngState(0)
backbone = CnnBackbone(rng)

# Four cells with 16/32/64/128 filters; each cell is conv(k=3, pad=1) ->
# batch norm -> ReLU, and the first three end with a stride-2 max pool.
# The lengths walk 13 -> 6 -> 3 -> 1; the last cell keeps length 1.
x = Tensor(rng.normal((4, 6, 13)))
print("input:", x.data.shape)
for i, cell in enumerate(backbone.cells, start=1):
    x = cell(x)
    pooled = "pooled" if cell.pooled else "no pool"
    print(f"after cell {i} ({cell.conv.out_channels} filters, {pooled}):",
          x.data.shape)

features = backbone(Tensor(rng.normal((4, 6, 13))))
print("flattened features:", features.data.shape)
print("parameters:", count_parameters(backbone))

# Train mode vs eval mode: batch norm switches between batch statistics and
# its running estimates, so evaluation is a pure function of the weights.
backbone.eval()
sample = Tensor(rng.normal((1, 6, 13)))
first = backbone(sample).data
second = backbone(sample).data
print("eval mode is deterministic:", (first == second).all())
