"""Reference model builders used by the CLI and the tests."""

from . import nn


def mnist_cnn(backend=None, dtype="f32"):
    """Small convolutional classifier for 1x28x28 images, 10 classes.

    Two 5x5 conv/pool stages (28 -> 24 -> 12 -> 8 -> 4 spatial) feed a
    1024-wide flatten into two dense layers with a log-softmax head.
    """
    return nn.Sequential(
        nn.Conv2D(1, 32, 5, dtype=dtype, backend=backend),
        nn.ReLU(),
        nn.MaxPool2D(2),
        nn.Conv2D(32, 64, 5, dtype=dtype, backend=backend),
        nn.ReLU(),
        nn.MaxPool2D(2),
        nn.View((1024,)),
        nn.Linear(1024, 128, dtype=dtype, backend=backend),
        nn.ReLU(),
        nn.Linear(128, 10, dtype=dtype, backend=backend),
        nn.LogSoftmax(),
    )


def mlp(in_dim, hidden, classes, backend=None, dtype="f32"):
    """Two-layer perceptron with a log-softmax head."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=dtype, backend=backend),
        nn.ReLU(),
        nn.Linear(hidden, classes, dtype=dtype, backend=backend),
        nn.LogSoftmax(),
    )
