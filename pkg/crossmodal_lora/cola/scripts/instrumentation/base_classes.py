from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ...components import app_logger


@dataclass(frozen=True)
class PoolEvent:
    """One pooled cross-modal vector handed to an encoder stage"""

    layer: int
    stage: str
    encoder: str
    source: str
    pooled: np.ndarray


class NotifierAbstractClass(ABC):
    """Abstract Base class for classes that emit pool events"""

    @abstractmethod
    def attach(self, observer: Observer) -> None:
        """Attach Observers

        Args:
            observer (Observer): The observer to attach
        """

    @abstractmethod
    def notify(self) -> None:
        """Notify all registered observers"""


class NotifierBaseClass(NotifierAbstractClass):
    """Base class for classes that emit pool events"""

    def __init__(self) -> None:
        self.event: PoolEvent | None = None

        self._observers: list[Observer] = []

    def attach(self, observer: Observer) -> None:
        """Attach Observers

        Args:
            observer (Observer): The observer to attach
        """
        self._observers.append(observer)

    def detach(self, observer: Observer) -> None:
        self._observers.remove(observer)

    @property
    def observed(self) -> bool:
        return bool(self._observers)

    def notify(self) -> None:
        """Notify all registered observers"""
        for observer in self._observers:
            observer.update(self)


class Observer(ABC):
    """Observer Abstract Class"""

    @abstractmethod
    def update(self, notifier: NotifierBaseClass) -> None:
        """Method that reacts to the latest event of the notifier when called

        Args:
            notifier (NotifierBaseClass): The Notifier (calling class)
        """


class PoolTraceObserver(Observer):
    """Keeps every pool event, in the order the forward pass produced them"""

    def __init__(self) -> None:
        self.events: list[PoolEvent] = []

    def update(self, notifier: NotifierBaseClass) -> None:
        if notifier.event is not None:
            self.events.append(notifier.event)
            app_logger.debug(
                "pool layer=%s stage=%s encoder=%s source=%s",
                notifier.event.layer,
                notifier.event.stage,
                notifier.event.encoder,
                notifier.event.source,
            )

    def clear(self) -> None:
        self.events.clear()


class CallbackObserver(Observer):
    """Forwards (layer, stage, encoder, pooled) to a user callback"""

    def __init__(self, callback: Callable[[int, str, str, np.ndarray], None]) -> None:
        self.callback = callback

    def update(self, notifier: NotifierBaseClass) -> None:
        event = notifier.event
        if event is not None:
            self.callback(event.layer, event.stage, event.encoder, event.pooled)
