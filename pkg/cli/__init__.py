"""Command-line front end."""

from cli.commands import run

__all__ = ["run"]
