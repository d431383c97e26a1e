"""Built-in architecture descriptions (shapes only)."""

from __future__ import annotations

from .network import Convolution, FullyConnected, MaxPool, NetworkSpec, ReLU, Softmax


def _alexnet_conv() -> NetworkSpec:
    # 224x224 input reaches 55x55 at stride 4 only with 2 pixels of padding.
    # conv2/4/5 keep the original two-way channel split so the conv MAC
    # total is the familiar 666 M.
    layers = (
        Convolution(96, 11, 11, stride=4, padding=2), ReLU(), MaxPool(3, 2),
        Convolution(256, 5, 5, padding=2, groups=2), ReLU(), MaxPool(3, 2),
        Convolution(384, 3, 3, padding=1), ReLU(),
        Convolution(384, 3, 3, padding=1, groups=2), ReLU(),
        Convolution(256, 3, 3, padding=1, groups=2), ReLU(), MaxPool(3, 2),
    )
    return NetworkSpec("alexnet-conv", (3, 224, 224), layers)


def _vgg16_conv() -> NetworkSpec:
    layers = []
    for width, depth in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(depth):
            layers += [Convolution(width, 3, 3, padding=1), ReLU()]
        layers.append(MaxPool(2, 2))
    return NetworkSpec("vgg16-conv", (3, 224, 224), tuple(layers))


def _fixture_cnn() -> NetworkSpec:
    layers = (
        Convolution(8, 3, 3, padding=1), ReLU(), MaxPool(2, 2),
        Convolution(16, 3, 3, padding=1), ReLU(), MaxPool(2, 2),
        FullyConnected(10), Softmax(),
    )
    return NetworkSpec("fixture-cnn", (1, 16, 16), layers)


ARCHS = {
    "alexnet-conv": _alexnet_conv,
    "vgg16-conv": _vgg16_conv,
    "fixture-cnn": _fixture_cnn,
}


def builtin_arch(name: str) -> NetworkSpec:
    try:
        return ARCHS[name]()
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {', '.join(ARCHS)}") from None
