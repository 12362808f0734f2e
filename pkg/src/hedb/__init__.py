"""Blind SQL over bit-encrypted tables using integer homomorphic encryption."""

from .circuits import Evaluator, OpCounters
from .enc_data import ColumnSpec, EncryptedTable, TableSchema, decrypt_table, encrypt_table
from .errors import HedbError
from .he_core import Ciphertext, SecurityParams, decrypt_bit, encrypt_bit, keygen
from .sql_front import compile_query, parse, render, validate

__version__ = "0.1.0"

__all__ = [
    "Ciphertext",
    "ColumnSpec",
    "EncryptedTable",
    "Evaluator",
    "HedbError",
    "OpCounters",
    "SecurityParams",
    "TableSchema",
    "compile_query",
    "decrypt_bit",
    "decrypt_table",
    "encrypt_bit",
    "encrypt_table",
    "keygen",
    "parse",
    "render",
    "validate",
]
