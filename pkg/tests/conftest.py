import pytest

from vrdlab.geometry import Box
from vrdlab.proposals import Detection, GroundTruth, Mode, Relationship, Scene


def grid_box(col, row=0, size=10.0, gap=20.0):
    return Box(col * gap, row * gap * 2.5, col * gap + size, row * gap * 2.5 + size)


def make_six_class_scene():
    """GT boxes g1..g6 in a row, relationships (g1, g2, 0) and (g5, g6, 1).

    Detections, in order: b1=g1, b2=g2, b3 and b3' hit nothing, b4=g3,
    b5=g4, b7=g6. Nothing detects g5.
    """
    gts = [grid_box(c) for c in range(6)]
    gt = GroundTruth(gts, [1, 2, 3, 4, 5, 6],
                     [Relationship(0, 1, 0), Relationship(4, 5, 1)])
    boxes = [gts[0], gts[1], grid_box(0, row=1), grid_box(1, row=1), gts[2], gts[3], gts[5]]
    classes = [1, 2, 7, 8, 3, 4, 6]
    dets = [Detection(b, c, 0.9 - 0.1 * k) for k, (b, c) in enumerate(zip(boxes, classes))]
    return Scene(dets, gt, Mode.GENERAL, image_id="six")


# detection indices in the six-class scene
B1, B2, B3, B3P, B4, B5, B7 = range(7)


@pytest.fixture
def six_class_scene():
    return make_six_class_scene()
