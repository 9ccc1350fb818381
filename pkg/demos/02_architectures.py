"""
Architecture presets: shapes, parameters, receptive fields
==========================================================

The localisation FCNs and grading CNNs are declarative presets.  This
script prints each preset's layer chain, parameter total, and the
effective aperture (receptive field) ladder of the FCN family.
"""

from oaknet.nn import (build_network, get_preset, last_conv_before_upsample,
                       list_presets, receptive_field)

print("available presets:", ", ".join(list_presets()))

# The aperture ladder: wider context made centre detection progressively
# better, from 9 pixels (stacked 3x3 convs) to 66 (three pooling stages).
print("\nreceptive fields of the localisation family:")
for preset, layer in [("fcn-center-3x3", "conv_out"),
                      ("fcn-center-7x7", "conv_out"),
                      ("fcn-center-pool2", "conv_out"),
                      ("fcn-center-pool3", "conv4"),
                      ("fcn-center-best", "conv4_2")]:
    rf = receptive_field(get_preset(preset), layer)
    print(f"  {preset:18s} {layer:10s} aperture {rf}")

# Layer-by-layer output shapes of the best classifier, straight from the
# static shape chain (no tensors involved).
print("\ncnn-clsf-best shape chain (conv/pool/dense layers):")
spec = get_preset("cnn-clsf-best")
for name, shape in spec.shape_chain():
    if name.startswith(("conv", "pool", "fc", "flatten")):
        print(f"  {name:10s} {shape}")

print("\nparameter totals:")
for preset in ["fcn-center-best", "cnn-clsf-best", "cnn-reg-best",
               "cnn-joint-best", "cnn-ordinal", "desk-fcn", "desk-cnn"]:
    net = build_network(get_preset(preset), seed=0)
    print(f"  {preset:18s} {net.parameter_count():>9,}")

# The default aperture report picks the last conv before upsampling.
best = get_preset("fcn-center-best")
layer = last_conv_before_upsample(best)
print(f"\nfcn-center-best default report layer: {layer} "
      f"(aperture {receptive_field(best, layer)})")
