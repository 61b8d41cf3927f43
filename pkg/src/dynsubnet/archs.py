"""Built-in desk-scale architectures as LayerSpec dictionaries."""

from .errors import ConfigurationError


def convnet6(num_classes=10):
    return [
        {"kind": "conv2d", "in": 3, "out": 16, "kernel": 3, "prunable": True},
        {"kind": "batchnorm2d", "in": 16},
        {"kind": "relu"},
        {"kind": "conv2d", "in": 16, "out": 32, "kernel": 3, "stride": 2, "prunable": True},
        {"kind": "batchnorm2d", "in": 32},
        {"kind": "relu"},
        {"kind": "conv2d", "in": 32, "out": 32, "kernel": 3, "prunable": True},
        {"kind": "batchnorm2d", "in": 32},
        {"kind": "relu"},
        {"kind": "avgpool2d"},
        {"kind": "flatten"},
        {"kind": "linear", "in": 32, "out": num_classes},
    ]


def resnet8(num_classes=10, width=16):
    """Stem plus three identity-shortcut basic blocks; the block outputs form one tie set."""
    layers = [
        {"kind": "conv2d", "in": 3, "out": width, "kernel": 3, "prunable": True},
        {"kind": "batchnorm2d", "in": width},
        {"kind": "relu"},
    ]
    for _ in range(3):
        skip = len(layers) - 1
        layers += [
            {"kind": "conv2d", "in": width, "out": width, "kernel": 3, "prunable": True},
            {"kind": "batchnorm2d", "in": width},
            {"kind": "relu"},
            {"kind": "conv2d", "in": width, "out": width, "kernel": 3, "prunable": True},
            {"kind": "batchnorm2d", "in": width},
        ]
        layers.append({"kind": "residual-add", "inputs": [len(layers) - 1, skip]})
        layers.append({"kind": "relu"})
    layers += [
        {"kind": "avgpool2d"},
        {"kind": "flatten"},
        {"kind": "linear", "in": width, "out": num_classes},
    ]
    return layers


def mlp(in_features, hidden=(3, 3), num_classes=4):
    """Flatten followed by prunable hidden linear layers and a fixed classifier."""
    layers = [{"kind": "flatten"}]
    prev = in_features
    for h in hidden:
        layers += [{"kind": "linear", "in": prev, "out": h, "prunable": True}, {"kind": "relu"}]
        prev = h
    layers.append({"kind": "linear", "in": prev, "out": num_classes})
    return layers


def tinyconv(num_classes=4, width=3):
    """Two prunable convolutions of ``width`` channels each; small enough for the brute-force oracle."""
    return [
        {"kind": "conv2d", "in": 3, "out": width, "kernel": 3, "prunable": True},
        {"kind": "batchnorm2d", "in": width},
        {"kind": "relu"},
        {"kind": "conv2d", "in": width, "out": width, "kernel": 3, "prunable": True},
        {"kind": "batchnorm2d", "in": width},
        {"kind": "relu"},
        {"kind": "avgpool2d"},
        {"kind": "flatten"},
        {"kind": "linear", "in": width, "out": num_classes},
    ]


BUILTIN = {"convnet6": convnet6, "resnet8": resnet8, "tinyconv": tinyconv}


def builtin(name, num_classes):
    try:
        return BUILTIN[name](num_classes)
    except KeyError:
        raise ConfigurationError(f"unknown architecture {name!r}; choose from {sorted(BUILTIN)}") from None
