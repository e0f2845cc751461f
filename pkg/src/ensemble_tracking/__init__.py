"""
Global visual object tracking with an ensemble of deformable-attention local trackers.

Each local tracker searches around its own reference position. The tracker that finds
the target hands its reference and an online query on to the next frame; when the
target is lost every tracker moves back to where it started.

Basic usage:
-------------

.. highlight:: python
.. code-block:: python
from ensemble_tracking import TrackingSession
from ensemble_tracking.synthetic import read_sequence
from ensemble_tracking.training import load_checkpoint

session = TrackingSession(load_checkpoint("model.pt"))

def main():
    for result in session.run(read_sequence("data/test/seq-000")):
        print(result)
"""
from ._session import TrackingSession

__all__ = ["TrackingSession"]
