"""Case descriptors and small builders shared by the tests."""


def single_spec(width=1e-3):
    return {
        "kind": "single",
        "x_range": [0.0, 2.0],
        "y_range": [0.0, 1.0],
        "fractures": [{"orientation": "vertical", "position": 1.0, "width": width}],
    }


def cross_spec(widths=(1e-3, 6e-4)):
    return {
        "kind": "intersecting",
        "x_range": [0.0, 1.0],
        "y_range": [0.0, 1.0],
        "fractures": [
            {"orientation": "horizontal", "position": 0.5, "width": widths[0]},
            {"orientation": "vertical", "position": 0.5, "width": widths[1]},
        ],
    }
