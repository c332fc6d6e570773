from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np


class ConvergenceStatus(Enum):
    """Stan sprawdzania sukcesu w trakcie epizodu."""
    CONVERGING = "converging"
    HOLDING = "holding"
    CONVERGED = "converged"
    EXPIRED = "expired"


@dataclass
class HoldWindow:
    """Ciąg kolejnych kroków z błędem cech poniżej progu."""
    start_step: int
    end_step: int
    max_error: float

    @property
    def length(self) -> int:
        return self.end_step - self.start_step + 1


class ConvergenceRules:
    """Kryteria sukcesu epizodu serwowania z konfigurowalnymi progami."""

    ROTATION_THRESHOLD_DEG = 3.0
    TRANSLATION_THRESHOLD_M = 0.03
    HOLD_STEPS = 20
    FEATURE_ERROR_THRESHOLD = 0.01

    def __init__(self, feature_error_threshold: Optional[float] = None, hold_steps: Optional[int] = None,
                 rotation_threshold_deg: Optional[float] = None,
                 translation_threshold_m: Optional[float] = None, max_steps: Optional[int] = None):
        self.feature_error_threshold = (self.FEATURE_ERROR_THRESHOLD if feature_error_threshold is None
                                        else float(feature_error_threshold))
        self.hold_steps = self.HOLD_STEPS if hold_steps is None else int(hold_steps)
        self.rotation_threshold_deg = (self.ROTATION_THRESHOLD_DEG if rotation_threshold_deg is None
                                       else float(rotation_threshold_deg))
        self.translation_threshold_m = (self.TRANSLATION_THRESHOLD_M if translation_threshold_m is None
                                        else float(translation_threshold_m))
        self.max_steps = max_steps
        if not (self.feature_error_threshold > 0 and self.rotation_threshold_deg > 0
                and self.translation_threshold_m > 0):
            raise ValueError("success thresholds must be > 0")
        if self.hold_steps < 1:
            raise ValueError(f"hold_steps must be >= 1, got {self.hold_steps}")
        if max_steps is not None and max_steps < self.hold_steps:
            raise ValueError(f"max_steps ({max_steps}) must be >= hold_steps ({self.hold_steps})")

        self.error_history: List[float] = []
        self.windows: List[HoldWindow] = []
        self._current: Optional[HoldWindow] = None
        self.status = ConvergenceStatus.CONVERGING

    @property
    def hold_start(self) -> Optional[int]:
        """Pierwszy krok trwającego (lub spełnionego) okna utrzymania."""
        return None if self._current is None else self._current.start_step

    def update(self, step: int, feature_error: float) -> ConvergenceStatus:
        """Przyjmuje błąd zmierzony w kroku ``step``; zwraca CONVERGED po zakończeniu okna utrzymania."""
        if self.status in (ConvergenceStatus.CONVERGED, ConvergenceStatus.EXPIRED):
            return self.status
        self.error_history.append(float(feature_error))
        if feature_error < self.feature_error_threshold:
            if self._current is None:
                self._current = HoldWindow(step, step, float(feature_error))
            else:
                self._current.end_step = step
                self._current.max_error = max(self._current.max_error, float(feature_error))
            if self._current.length >= self.hold_steps:
                self.windows.append(self._current)
                self.status = ConvergenceStatus.CONVERGED
            else:
                self.status = ConvergenceStatus.HOLDING
        else:
            if self._current is not None:
                self.windows.append(self._current)
                self._current = None
            self.status = ConvergenceStatus.CONVERGING
        if (self.status is not ConvergenceStatus.CONVERGED and self.max_steps is not None
                and step + 1 >= self.max_steps):
            self.status = ConvergenceStatus.EXPIRED
        return self.status

    def check_terminal(self, te: float, re: float) -> bool:
        """Test pozy końcowej: błąd translacji (m) i rotacji (stopnie) w granicach progów."""
        return te <= self.translation_threshold_m and re <= self.rotation_threshold_deg

    def get_summary(self) -> Dict:
        """Podsumowanie przebiegu błędu i okien utrzymania."""
        if not self.error_history:
            return {
                'steps': 0,
                'status': self.status.value,
                'hold_start': None,
                'windows': 0,
                'min_error': float('inf'),
                'final_error': float('inf'),
            }
        return {
            'steps': len(self.error_history),
            'status': self.status.value,
            'hold_start': self.hold_start,
            'windows': len(self.windows) + (1 if self._current is not None and
                                            self.status is not ConvergenceStatus.CONVERGED else 0),
            'min_error': float(np.min(self.error_history)),
            'final_error': float(self.error_history[-1]),
        }
