"""Transfer attacks through distilled students: numpy engine, model zoo, attacks and evaluation."""

__version__ = "0.1.0"
