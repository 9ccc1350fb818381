"""Named architecture presets.

FCN presets produce a 256x256 sigmoid heatmap for knee-joint localisation;
CNN presets grade 200x300 knee crops.  The ``desk-*`` variants divide every
width by four so the full training loop runs in minutes on a laptop CPU.

Preset names:
    fcn-center-3x3    four stacked 3x3 convs, aperture 9
    fcn-center-7x7    7x7 front kernel, aperture 11
    fcn-center-pool2  two pool stages + 4x upsampling, aperture 34 (final conv)
    fcn-center-pool3  three pool stages + 8x upsampling, aperture 42
    fcn-center-best   four conv stages, three pools, 8x upsampling, aperture 66
    fcn-roi           same layout as fcn-center-best, trained on ROI masks
    cnn-clsf-best     4-conv classifier, 1024-wide fc, softmax over 5 grades
    cnn-reg-best      6-conv regressor, linear continuous-grade output
    cnn-joint-best    7-conv trunk with twin softmax + linear heads
    cnn-ordinal       joint trunk with the fixed-weight expected-grade head
    desk-fcn          fcn-center-best at quarter width
    desk-cnn          cnn-joint-best at quarter width; mode picks the heads
"""

from __future__ import annotations

from .specs import HeadSpec, LayerSpec, NetworkSpec

FCN_INPUT = (1, 256, 256)
CNN_INPUT = (1, 200, 300)
GRADE_WEIGHTS = (0, 1, 2, 3, 4)

MODES = ("clsf", "reg", "joint", "ordinal")


def _conv(name, kernels, size, stride=1, l2=0.0):
    params = {"kernels": kernels, "kernel_size": (size, size), "stride": stride,
              "padding": "same"}
    if l2:
        params["l2"] = l2
    return LayerSpec(name, "conv", params)


def _pool(name, size=3, stride=2):
    return LayerSpec(name, "maxpool", {"kernel_size": (size, size), "stride": stride})


def _relu(name):
    return LayerSpec(name, "relu")


def _bn(name):
    return LayerSpec(name, "batchnorm")


def _conv_bn_relu(name, kernels, size, stride=1, l2=0.0):
    return [_conv(name, kernels, size, stride, l2), _bn("bn_" + name),
            _relu("relu_" + name)]


# ---------------------------------------------------------------------------
# FCN family (conv + ReLU stacks, sigmoid pixel head)
# ---------------------------------------------------------------------------

def _fcn_tail(kernel_count=1):
    return [_conv("conv_out", kernel_count, 1), LayerSpec("sigmoid_out", "sigmoid")]


def fcn_center_3x3():
    trunk = [
        _conv("conv1", 32, 3), _relu("relu1"),
        _conv("conv2", 32, 3), _relu("relu2"),
        _conv("conv3", 64, 3), _relu("relu3"),
        _conv("conv4", 64, 3), _relu("relu4"),
        *_fcn_tail(),
    ]
    return NetworkSpec("fcn-center-3x3", FCN_INPUT, tuple(trunk))


def fcn_center_7x7():
    trunk = [
        _conv("conv1", 32, 7), _relu("relu1"),
        _conv("conv2", 64, 3), _relu("relu2"),
        _conv("conv3", 96, 3), _relu("relu3"),
        *_fcn_tail(),
    ]
    return NetworkSpec("fcn-center-7x7", FCN_INPUT, tuple(trunk))


def fcn_center_pool2():
    trunk = [
        _conv("conv1", 32, 7), _relu("relu1"), _pool("pool1", 2, 2),
        _conv("conv2", 64, 3), _relu("relu2"), _pool("pool2", 2, 2),
        _conv("conv3", 96, 3), _relu("relu3"),
        LayerSpec("upsample4", "upsample", {"factor": 4}),
        *_fcn_tail(),
    ]
    return NetworkSpec("fcn-center-pool2", FCN_INPUT, tuple(trunk))


def fcn_center_pool3():
    trunk = [
        _conv("conv1", 32, 7), _relu("relu1"), _pool("pool1", 2, 2),
        _conv("conv2", 32, 3), _relu("relu2"), _pool("pool2", 2, 2),
        _conv("conv3", 64, 3), _relu("relu3"), _pool("pool3", 2, 2),
        _conv("conv4", 96, 3), _relu("relu4"),
        LayerSpec("upsample5", "upsample", {"factor": 8}),
        *_fcn_tail(),
    ]
    return NetworkSpec("fcn-center-pool3", FCN_INPUT, tuple(trunk))


def _fcn_best_trunk(widths=(32, 32, 32, 64, 64, 96, 96)):
    w1, w21, w22, w31, w32, w41, w42 = widths
    return [
        _conv("conv1", w1, 3), _relu("relu1"), _pool("pool1", 2, 2),
        _conv("conv2_1", w21, 3), _relu("relu2_1"),
        _conv("conv2_2", w22, 3), _relu("relu2_2"), _pool("pool2", 2, 2),
        _conv("conv3_1", w31, 3), _relu("relu3_1"),
        _conv("conv3_2", w32, 3), _relu("relu3_2"), _pool("pool3", 2, 2),
        _conv("conv4_1", w41, 3), _relu("relu4_1"),
        _conv("conv4_2", w42, 3), _relu("relu4_2"),
        LayerSpec("upsample5", "upsample", {"factor": 8}),
        *_fcn_tail(),
    ]


def fcn_center_best():
    return NetworkSpec("fcn-center-best", FCN_INPUT, tuple(_fcn_best_trunk()))


def fcn_roi():
    return NetworkSpec("fcn-roi", FCN_INPUT, tuple(_fcn_best_trunk()))


def desk_fcn():
    return NetworkSpec("desk-fcn", FCN_INPUT,
                       tuple(_fcn_best_trunk(widths=(8, 8, 8, 16, 16, 24, 24))))


# ---------------------------------------------------------------------------
# CNN family for severity grading
# ---------------------------------------------------------------------------

def cnn_clsf_best():
    trunk = [
        *_conv_bn_relu("conv1", 32, 11, stride=2), _pool("pool1"),
        *_conv_bn_relu("conv2", 64, 5), _pool("pool2"),
        *_conv_bn_relu("conv3", 96, 3, l2=0.01), _pool("pool3"),
        *_conv_bn_relu("conv4", 128, 3, l2=0.01),
        LayerSpec("drop_conv4", "dropout", {"rate": 0.25}),
        _pool("pool4"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc5", "dense", {"units": 1024, "l2": 0.01}), _relu("relu_fc5"),
        LayerSpec("drop_fc5", "dropout", {"rate": 0.5}),
    ]
    heads = {"clsf": HeadSpec("trunk", (LayerSpec("fc6", "softmax_dense", {"units": 5}),))}
    return NetworkSpec("cnn-clsf-best", CNN_INPUT, tuple(trunk), heads)


def cnn_reg_best():
    trunk = [
        *_conv_bn_relu("conv1", 32, 11, stride=2), _pool("pool1"),
        *_conv_bn_relu("conv2", 64, 5), _pool("pool2"),
        *_conv_bn_relu("conv3_1", 64, 3), *_conv_bn_relu("conv3_2", 64, 3),
        _pool("pool3"),
        *_conv_bn_relu("conv4_1", 128, 3), *_conv_bn_relu("conv4_2", 128, 3),
        _pool("pool4"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc5", "dense", {"units": 1024}), _relu("relu_fc5"),
    ]
    # dropout sits after the output dense layer here, as published
    heads = {"reg": HeadSpec("trunk", (LayerSpec("fc6", "dense", {"units": 1}),
                                       LayerSpec("drop_fc6", "dropout", {"rate": 0.5})))}
    return NetworkSpec("cnn-reg-best", CNN_INPUT, tuple(trunk), heads)


def _joint_trunk(widths=(32, 64, 64, 96, 96, 128, 128), fc_units=512, l2=0.01):
    w1, w21, w22, w31, w32, w41, w42 = widths
    return [
        *_conv_bn_relu("conv1", w1, 11, stride=2), _pool("pool1"),
        *_conv_bn_relu("conv2_1", w21, 3), *_conv_bn_relu("conv2_2", w22, 3, l2=l2),
        _pool("pool2"),
        *_conv_bn_relu("conv3_1", w31, 3, l2=l2), *_conv_bn_relu("conv3_2", w32, 3, l2=l2),
        _pool("pool3"),
        *_conv_bn_relu("conv4_1", w41, 3, l2=l2), *_conv_bn_relu("conv4_2", w42, 3, l2=l2),
        _pool("pool4"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc5", "dense", {"units": fc_units, "l2": l2}), _relu("relu_fc5"),
        LayerSpec("drop_fc5", "dropout", {"rate": 0.3}),
    ]


def _grade_heads(mode, fc_l2=0.01):
    clsf = HeadSpec("trunk", (LayerSpec("fc6_clsf", "softmax_dense",
                                        {"units": 5, "l2": fc_l2}),))
    if mode == "clsf":
        return {"clsf": clsf}
    if mode == "reg":
        return {"reg": HeadSpec("trunk", (LayerSpec("fc6_reg", "dense",
                                                    {"units": 1, "l2": fc_l2}),))}
    if mode == "joint":
        return {"clsf": clsf,
                "reg": HeadSpec("trunk", (LayerSpec("fc6_reg", "dense",
                                                    {"units": 1, "l2": fc_l2}),))}
    if mode == "ordinal":
        return {"clsf": clsf,
                "reg": HeadSpec("clsf", (LayerSpec("fc7_reg", "ordinal_head",
                                                   {"fixed_weights": GRADE_WEIGHTS}),))}
    raise ValueError(f"unknown mode {mode!r}")


def cnn_joint_best():
    return NetworkSpec("cnn-joint-best", CNN_INPUT, tuple(_joint_trunk()),
                       _grade_heads("joint"))


def cnn_ordinal():
    return NetworkSpec("cnn-ordinal", CNN_INPUT, tuple(_joint_trunk()),
                       _grade_heads("ordinal"))


def desk_cnn(mode="joint"):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    name = "desk-cnn" if mode == "joint" else f"desk-cnn-{mode}"
    trunk = _joint_trunk(widths=(8, 16, 16, 24, 24, 32, 32), fc_units=128)
    return NetworkSpec(name, CNN_INPUT, tuple(trunk), _grade_heads(mode))


_BUILDERS = {
    "fcn-center-3x3": fcn_center_3x3,
    "fcn-center-7x7": fcn_center_7x7,
    "fcn-center-pool2": fcn_center_pool2,
    "fcn-center-pool3": fcn_center_pool3,
    "fcn-center-best": fcn_center_best,
    "fcn-roi": fcn_roi,
    "desk-fcn": desk_fcn,
    "cnn-clsf-best": cnn_clsf_best,
    "cnn-reg-best": cnn_reg_best,
    "cnn-joint-best": cnn_joint_best,
    "cnn-ordinal": cnn_ordinal,
    "desk-cnn": desk_cnn,
    "desk-cnn-clsf": lambda: desk_cnn("clsf"),
    "desk-cnn-reg": lambda: desk_cnn("reg"),
    "desk-cnn-ordinal": lambda: desk_cnn("ordinal"),
}

# quantifier presets and the training objective they carry
PRESET_MODE = {
    "cnn-clsf-best": "clsf",
    "cnn-reg-best": "reg",
    "cnn-joint-best": "joint",
    "cnn-ordinal": "ordinal",
    "desk-cnn": "joint",
    "desk-cnn-clsf": "clsf",
    "desk-cnn-reg": "reg",
    "desk-cnn-ordinal": "ordinal",
}

DEFAULT_PRESET_FOR_MODE = {
    "clsf": "cnn-clsf-best",
    "reg": "cnn-reg-best",
    "joint": "cnn-joint-best",
    "ordinal": "cnn-ordinal",
}


def list_presets():
    return sorted(_BUILDERS)


def get_preset(name: str) -> NetworkSpec:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: "
                       f"{', '.join(list_presets())}") from None
