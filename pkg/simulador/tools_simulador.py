"""
Utilidades de salida del simulador: respuestas JSON, tabla de tiempos por transferencia
y registro opcional de métricas de la línea de comandos.
"""

import csv
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from simulador.model import SimResult

logger = logging.getLogger(__name__)


class ResponseFormatter:
    """
    Clase para formatear respuestas en JSON y texto plano.
    """

    @staticmethod
    def format_success_response(
        operation: str,
        data: Dict[str, Any],
        message: str = "Operación exitosa"
    ) -> str:
        """
        Crea una respuesta JSON exitosa.

        Args:
            operation: Tipo de operación realizada
            data: Datos relevantes de la operación
            message: Mensaje descriptivo

        Returns:
            str: JSON formateado como string
        """
        response = {
            "status": "success",
            "operation": operation,
            "message": message,
            "data": data,
        }
        return json.dumps(response, ensure_ascii=False, indent=2, sort_keys=True)

    @staticmethod
    def format_error_response(
        operation: str,
        error_message: str,
        error_type: str = "ProcessingError"
    ) -> str:
        """
        Crea una respuesta JSON de error.

        Args:
            operation: Tipo de operación que falló
            error_message: Descripción del error
            error_type: Tipo de error

        Returns:
            str: JSON formateado como string
        """
        response = {
            "status": "error",
            "operation": operation,
            "error": {
                "type": error_type,
                "message": error_message
            }
        }
        return json.dumps(response, ensure_ascii=False, indent=2)

    @staticmethod
    def format_simulation_response(result: SimResult, page: str, policy: str) -> str:
        """Resumen JSON de una simulación (flag --json de simulate)."""
        data = result.to_dict()
        data["page"] = page
        data["policy"] = policy
        return ResponseFormatter.format_success_response(
            operation="simulate",
            data=data,
            message=f"PLT {result.page_load_time:.9g} s",
        )

    @staticmethod
    def render_transfer_table(result: SimResult) -> str:
        """
        Tabla separada por tabuladores: una fila por transferencia, ordenada por inicio.
        """
        lines = [f"plt_s\t{result.page_load_time:.9g}",
                 "id\tstart_s\tend_s\tinterfaces\tconnection\treused"]
        ordered = sorted(result.per_transfer.items(), key=lambda item: (item[1].start_time, item[0]))
        for tid, timing in ordered:
            interfaces = ",".join(f"if{i + 1}" for i in timing.interfaces)
            lines.append(
                f"{tid}\t{timing.start_time:.9g}\t{timing.end_time:.9g}\t{interfaces}\t"
                f"{timing.connection_id}\t{'yes' if timing.reused else 'no'}"
            )
        return "\n".join(lines)


def save_metric(
    comando: str,
    objetivo: str,
    elapsed: float,
    status: str,
    path: Optional[Union[str, Path]] = None,
) -> Optional[Path]:
    """
    Añade una fila al CSV de métricas indicado por SIMULADOR_METRICS_CSV (o `path`).
    Sin destino configurado no escribe nada.
    """
    target = path or os.getenv("SIMULADOR_METRICS_CSV")
    if not target:
        return None
    target = Path(target)
    file_exists = target.exists()
    with open(target, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not file_exists:
            writer.writerow(["timestamp", "comando", "objetivo", "tiempo_s", "status"])
        writer.writerow([
            datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            comando, objetivo, f"{elapsed:.2f}", status
        ])
    return target
