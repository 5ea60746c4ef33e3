from typing import Any, Callable

from app.schemas import Command

Handler = Callable[..., dict[str, Any]]


class CommandRouter:
    """
    Groups command handlers; registered on a CommandRegistry with include_router.

    A handler returns its results for the run manifest and logs through the
    module logger. `print` is reserved for output the user asked for, such as
    a report table, so stdout stays clean for piping.
    """

    def __init__(self, tags: list[str] | None = None):
        self.tags = tags or []
        self.handlers: dict[Command, Handler] = {}

    def command(self, name: Command) -> Callable[[Handler], Handler]:
        def register(handler: Handler) -> Handler:
            if name in self.handlers:
                raise ValueError(f"command {name} registered twice")
            self.handlers[name] = handler
            return handler
        return register


class CommandRegistry:
    def __init__(self):
        self.handlers: dict[Command, Handler] = {}

    def include_router(self, router: CommandRouter) -> None:
        overlap = self.handlers.keys() & router.handlers.keys()
        if overlap:
            raise ValueError(f"commands {sorted(overlap)} already registered")
        self.handlers.update(router.handlers)

    def get(self, name: Command) -> Handler | None:
        return self.handlers.get(name)
