"""
Simulador de carga de páginas Web sobre múltiples interfaces de acceso.
"""

__version__ = "0.1.0"
