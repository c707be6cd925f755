"""
Configuración común de pytest: raíz del repositorio (paquete `simulador`) y carpeta Test
(helpers `_make_*` compartidos entre módulos de tests) en sys.path.
"""

import os
import sys

TEST_DIR = os.path.dirname(os.path.abspath(__file__))
REPO_ROOT = os.path.abspath(os.path.join(TEST_DIR, ".."))

for path in (REPO_ROOT, TEST_DIR):
    if path not in sys.path:
        sys.path.insert(0, path)
