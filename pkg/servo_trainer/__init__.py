"""Depth-aware keypoint visual servoing: scene synthesis, controllers and closed-loop evaluation."""
