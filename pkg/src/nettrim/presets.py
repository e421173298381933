"""Network presets."""

from .nn import conv2d, dense, maxpool2d, relu, softmax_xent

MNIST_SHAPE = (1, 28, 28)


def lenet(conv1=20, conv2=50, fc1=500, classes=10):
    """LeNet with a ReLU after each hidden conv/dense layer.

    ReLUs sit directly after each conv so that the conv channels have exactly
    zero activations to count; parameter counts match the classic Caffe LeNet.
    """
    return [
        conv2d(conv1, 5), relu(), maxpool2d(2),
        conv2d(conv2, 5), relu(), maxpool2d(2),
        dense(fc1), relu(),
        dense(classes),
        softmax_xent(),
    ]


PRESETS = {"lenet": lenet}
