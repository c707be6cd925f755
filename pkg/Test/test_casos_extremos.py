"""
Tests de casos extremos — Simulador de carga de páginas multi-interfaz
======================================================================
Cubre:
  - Transferencias vacías, TLS, pipelining y cierre por inactividad
  - Límites de conexiones por servidor y totales
  - Entradas inválidas (páginas, escenarios, configuración, HAR, niveles, speedups)
  - Línea de comandos: códigos de salida y formato de errores

Ejecución:
    pytest Test/test_casos_extremos.py -v
"""

import json
from unittest.mock import patch

import pytest

from simulador.engine import Phase, build_state, run_simulation
from simulador.experiment import (
    FactorLevels,
    RunDescriptor,
    compute_speedups,
    get_preset,
    load_levels,
    load_speedups,
    run_design,
)
from simulador.main import EXIT_INTERNAL, EXIT_INVALID, EXIT_OK, main
from simulador.model import (
    EmptyFactorError,
    InterfaceSpec,
    InvalidInputError,
    MalformedHarError,
    NetworkScenario,
    Postpone,
    SimConfig,
    TransferSpec,
    WorkloadPage,
    load_config,
    load_page,
    load_scenario,
    parse_policy,
    save_page,
)
from simulador.policies import decide
from simulador.workload import SyntheticSpec, generate_synthetic, parse_har

from test_funcionalidades import (
    MBIT,
    _add_conns,
    _make_conn,
    _make_page,
    _make_record,
    _make_scenario,
    _make_transfer,
)


def _run(page, scenario, policy="if1", **config):
    return run_simulation(page, scenario, parse_policy(policy), SimConfig(**config))


def _write_json(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


# ─────────────────────────────────────────────────────────────────────────────
# CASO 1: Transferencias vacías, TLS, pipelining e inactividad
# ─────────────────────────────────────────────────────────────────────────────

class TestTiemposDeConexion:

    def test_tls_suma_dos_rtt_antes_de_la_peticion(self):
        page = _make_page(_make_transfer("A", size=14_600, tls=True))
        result = _run(page, _make_scenario((100, 10)))
        assert result.page_load_time == pytest.approx(0.5, rel=1e-9)

    def test_tls_desactivado_por_configuracion(self):
        page = _make_page(_make_transfer("A", size=0, tls=True))
        result = _run(page, _make_scenario((100, 10)), tls_handshake_rtts=0)
        assert result.page_load_time == pytest.approx(0.2, rel=1e-9)

    def test_pipelining_adelanta_la_peticion_encolada(self):
        page = _make_page(_make_transfer("A"), _make_transfer("B"))
        with_pipelining = _run(page, _make_scenario((100, 10)), pipelining=True)
        without = _run(page, _make_scenario((100, 10)))
        assert with_pipelining.page_load_time == pytest.approx(0.2, rel=1e-9)
        assert without.page_load_time == pytest.approx(0.3, rel=1e-9)
        assert without.per_transfer["B"].reused is True

    def test_cadena_de_objetos_vacios_reutiliza_a_un_rtt(self):
        page = _make_page(
            _make_transfer("A"),
            _make_transfer("B", deps={"A"}),
            _make_transfer("C", deps={"B"}),
        )
        result = _run(page, _make_scenario((50, 10)))
        assert result.page_load_time == pytest.approx(0.1 + 0.05 + 0.05, rel=1e-9)
        assert result.per_transfer["C"].enabled_at == pytest.approx(result.per_transfer["B"].end_time)

    def test_postergada_espera_al_cierre_por_inactividad(self):
        page = _make_page(_make_transfer("A"), _make_transfer("B"))
        result = _run(page, _make_scenario((100, 10), (100, 10)), "rr", max_conns_per_server=1)
        assert result.per_transfer["B"].interfaces == (1,)
        assert result.page_load_time == pytest.approx(0.2 + 30.0 + 0.2, rel=1e-9)

    def test_timeout_de_inactividad_configurable(self):
        page = _make_page(_make_transfer("A"), _make_transfer("B"))
        result = _run(page, _make_scenario((100, 10), (100, 10)), "rr", max_conns_per_server=1, idle_timeout=1.0)
        assert result.page_load_time == pytest.approx(0.2 + 1.0 + 0.2, rel=1e-9)


# ─────────────────────────────────────────────────────────────────────────────
# CASO 2: Límites de conexiones
# ─────────────────────────────────────────────────────────────────────────────

class TestLimitesDeConexiones:

    def test_nunca_mas_de_seis_por_servidor(self):
        page = _make_page(*[_make_transfer(f"t{i}", size=200_000) for i in range(12)])
        result = _run(page, _make_scenario((30, 5)))
        assert result.peak_connections_per_host == 6
        assert len(result.per_transfer) == 12

    def test_nunca_mas_de_diecisiete_en_total(self):
        transfers = [_make_transfer(f"t{i}", size=100_000, host=f"h{i % 20}") for i in range(40)]
        result = _run(_make_page(*transfers), _make_scenario((30, 5), (60, 20)), "eaf")
        assert result.peak_connections_total <= 17
        assert result.peak_connections_per_host <= 6

    def test_eaf_pospone_si_no_hay_candidatos(self):
        page = _make_page(_make_transfer("A", size=10**7), _make_transfer("X"))
        scenario = _make_scenario((100, 10))
        state = build_state(page, scenario, parse_policy("eaf"), SimConfig())
        _add_conns(state, [
            _make_conn(i, phase=Phase.RECEIVING, assigned_transfer="A", completion_at=100.0)
            for i in range(1, 7)
        ])
        assert decide(state.policy, state, page.by_id["X"], state.config) == Postpone()

    def test_politica_de_interfaz_pospone_en_el_limite(self):
        page = _make_page(_make_transfer("A", size=10**7), _make_transfer("X"))
        state = build_state(page, _make_scenario((100, 10)), parse_policy("if1"), SimConfig())
        _add_conns(state, [
            _make_conn(i, phase=Phase.RECEIVING, assigned_transfer="A", completion_at=100.0)
            for i in range(1, 7)
        ])
        assert decide(state.policy, state, page.by_id["X"], state.config) == Postpone()


# ─────────────────────────────────────────────────────────────────────────────
# CASO 3: Entradas inválidas
# ─────────────────────────────────────────────────────────────────────────────

class TestEntradasInvalidas:

    def test_simular_pagina_con_ciclo(self):
        page = _make_page(_make_transfer("R"), _make_transfer("A", deps={"B"}), _make_transfer("B", deps={"A"}))
        with pytest.raises(InvalidInputError) as exc:
            _run(page, _make_scenario((10, 1)))
        assert exc.value.tag == "cycle"

    def test_simular_con_interfaz_inexistente(self):
        page = _make_page(_make_transfer("A"))
        with pytest.raises(InvalidInputError) as exc:
            _run(page, _make_scenario((10, 1)), "if2")
        assert exc.value.tag == "invalid interface"

    def test_escenario_sin_interfaces(self):
        page = _make_page(_make_transfer("A"))
        with pytest.raises(InvalidInputError):
            _run(page, NetworkScenario(()))

    def test_rtt_negativo(self):
        page = _make_page(_make_transfer("A"))
        with pytest.raises(InvalidInputError, match="rtt must be positive"):
            _run(page, NetworkScenario((InterfaceSpec("if1", -1, MBIT),)))

    def test_json_invalido(self, tmp_path):
        (tmp_path / "page.json").write_text("{no es json")
        with pytest.raises(InvalidInputError, match="invalid JSON"):
            load_page(tmp_path / "page.json")

    def test_pagina_sin_campos_obligatorios(self, tmp_path):
        path = _write_json(tmp_path / "page.json", {"name": "x", "transfers": [{"id": "A"}]})
        with pytest.raises(InvalidInputError, match="page file"):
            load_page(path)

    def test_escenario_con_bandwidth_no_numerico(self, tmp_path):
        path = _write_json(tmp_path / "s.json", {"interfaces": [{"name": "a", "rtt_ms": 1, "bandwidth_bps": "x"}]})
        with pytest.raises(InvalidInputError, match="scenario file"):
            load_scenario(path)

    def test_estimador_desconocido(self, tmp_path):
        path = _write_json(tmp_path / "c.json", {"bandwidth_estimator": "magic"})
        with pytest.raises(InvalidInputError):
            load_config(path)

    def test_preset_desconocido(self):
        with pytest.raises(InvalidInputError, match="unknown preset"):
            get_preset("lunar")

    def test_har_no_json(self):
        with pytest.raises(MalformedHarError):
            parse_har(b"\xff\xfe no json")

    def test_har_con_url_sin_host(self):
        document = json.dumps({"log": {"entries": [{
            "startedDateTime": "2024-01-01T00:00:00Z", "time": 5,
            "request": {"url": "about:blank"}, "response": {},
        }]}})
        with pytest.raises(MalformedHarError) as exc:
            parse_har(document)
        assert exc.value.entry_index == 0

    def test_semilla_fuera_de_rango(self):
        assert SimConfig(rng_seed=-1).validate()


class TestExperimentoInvalido:

    def test_niveles_con_politica_desconocida(self, tmp_path):
        path = _write_json(tmp_path / "levels.json", {
            "policies": ["if1", "warp"], "if1_rtt_ms": [10], "if1_bw_bps": [1e6],
            "if2_rtt_ms": [20], "if2_bw_bps": [1e6],
        })
        with pytest.raises(InvalidInputError, match="unknown policy"):
            load_levels(path, [generate_synthetic(SyntheticSpec(((2, 1024),)))])

    def test_niveles_con_factor_vacio(self, tmp_path):
        path = _write_json(tmp_path / "levels.json", {
            "policies": ["if1"], "if1_rtt_ms": [], "if1_bw_bps": [1e6],
            "if2_rtt_ms": [20], "if2_bw_bps": [1e6],
        })
        with pytest.raises(EmptyFactorError):
            load_levels(path, [generate_synthetic(SyntheticSpec(((2, 1024),)))])

    def test_niveles_que_no_son_un_objeto(self, tmp_path):
        path = _write_json(tmp_path / "levels.json", [1, 2, 3])
        with pytest.raises(InvalidInputError):
            load_levels(path, [])

    def test_sin_paginas(self):
        levels = FactorLevels(("if1",), (), (10.0,), (MBIT,), (20.0,), (MBIT,))
        with pytest.raises(EmptyFactorError):
            levels.validate()

    def test_paralelismo_cero(self):
        page = generate_synthetic(SyntheticSpec(((2, 1024),)))
        runs = [RunDescriptor(page.name, "if1", 10.0, MBIT, 20.0, MBIT)]
        with pytest.raises(InvalidInputError):
            run_design(runs, {page.name: page}, SimConfig(), parallelism=0)

    def test_pagina_desconocida(self):
        runs = [RunDescriptor("fantasma", "if1", 10.0, MBIT, 20.0, MBIT)]
        with pytest.raises(InvalidInputError, match="unknown page"):
            run_design(runs, {}, SimConfig())

    def test_speedups_sin_referencia_en_modo_permisivo(self):
        records = [_make_record("p", "eaf", 1.0), _make_record("q", "if1", 2.0), _make_record("q", "eaf", 1.0)]
        speedups = compute_speedups(records, strict=False)
        assert {(s.page, s.policy) for s in speedups} == {("q", "if1"), ("q", "eaf")}

    def test_ejecuciones_fallidas_no_entran_en_speedups(self):
        records = [_make_record("p", "if1", 2.0), _make_record("p", "if3", None, status="error:invalid interface")]
        assert [s.policy for s in compute_speedups(records)] == ["if1"]

    def test_speedups_csv_vacio(self, tmp_path):
        (tmp_path / "speedups.csv").write_text("")
        with pytest.raises(InvalidInputError):
            load_speedups(tmp_path / "speedups.csv")

    def test_speedups_csv_sin_columnas(self, tmp_path):
        (tmp_path / "speedups.csv").write_text("page,policy\np,if1\n")
        with pytest.raises(InvalidInputError, match="missing column"):
            load_speedups(tmp_path / "speedups.csv")


# ─────────────────────────────────────────────────────────────────────────────
# CASO 4: Línea de comandos
# ─────────────────────────────────────────────────────────────────────────────

@pytest.fixture
def page_file(tmp_path):
    page = WorkloadPage("demo", (
        TransferSpec("root", 10_240, "a.example"),
        TransferSpec("img", 51_200, "b.example", deps=frozenset({"root"})),
        TransferSpec("css", 2_048, "a.example", deps=frozenset({"root"})),
    ))
    return save_page(page, tmp_path / "demo.json")


class TestLineaDeComandos:

    def test_simulate_con_preset(self, page_file, capsys):
        assert main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "eaf"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("plt_s\t")
        assert lines[1] == "id\tstart_s\tend_s\tinterfaces\tconnection\treused"
        assert lines[2].startswith("root\t0\t")

    def test_simulate_json(self, page_file, capsys):
        assert main(["simulate", "--page", str(page_file), "--preset", "asymmetric",
                     "--policy", "mptcp_rnd", "--seed", "3", "--json"]) == EXIT_OK
        data = json.loads(capsys.readouterr().out)
        assert data["status"] == "success"
        assert set(data["data"]["per_transfer"]) == {"root", "img", "css"}

    def test_simulate_con_traza(self, page_file, capsys):
        assert main(["simulate", "--page", str(page_file), "--preset", "symmetric",
                     "--policy", "if1", "--trace"]) == EXIT_OK
        trace = [line for line in capsys.readouterr().err.splitlines() if "\t" in line]
        times = [float(line.split("\t")[0]) for line in trace]
        assert times and times == sorted(times)

    def test_politica_desconocida_sale_con_dos(self, page_file, capsys):
        assert main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "foo"]) == EXIT_INVALID
        err = capsys.readouterr().err
        payload = json.loads(err[err.index("{\n"):])
        assert payload["status"] == "error"
        assert "unknown policy" in payload["error"]["message"]

    def test_pagina_inexistente_sale_con_dos(self, tmp_path):
        code = main(["simulate", "--page", str(tmp_path / "nada.json"), "--preset", "symmetric", "--policy", "if1"])
        assert code == EXIT_INVALID

    def test_pagina_con_ciclo_sale_con_dos(self, tmp_path, capsys):
        page = _write_json(tmp_path / "ciclo.json", {"name": "ciclo", "transfers": [
            {"id": "R", "size_bytes": 1000, "host": "h", "deps": []},
            {"id": "A", "size_bytes": 1000, "host": "h", "deps": ["B"]},
            {"id": "B", "size_bytes": 1000, "host": "h", "deps": ["A"]},
        ]})
        code = main(["simulate", "--page", str(page), "--preset", "symmetric", "--policy", "if1"])
        assert code == EXIT_INVALID
        err = capsys.readouterr().err
        payload = json.loads(err[err.index("{\n"):])
        assert payload["status"] == "error"
        assert "cycle" in payload["error"]["message"]
        assert "A" in payload["error"]["message"] and "B" in payload["error"]["message"]

    def test_escenario_con_interfaz_de_mas(self, page_file, tmp_path):
        scenario = _write_json(tmp_path / "s.json", {"interfaces": [{"name": "wifi", "rtt_ms": 20, "bandwidth_bps": 1e6}]})
        code = main(["simulate", "--page", str(page_file), "--scenario", str(scenario), "--policy", "if2"])
        assert code == EXIT_INVALID

    def test_gen_workload(self, tmp_path, capsys):
        out = tmp_path / "gen.json"
        assert main(["gen-workload", "--objects", "4x10KB", "--hosts", "2", "--out", str(out)]) == EXIT_OK
        assert "transfers\t5" in capsys.readouterr().out
        assert len(load_page(out).transfers) == 5

    def test_ingest_har(self, tmp_path, capsys):
        har = _write_json(tmp_path / "site.har", {"log": {"entries": [
            {"startedDateTime": "2024-01-01T00:00:00.000Z", "time": 100,
             "request": {"url": "https://a.example/"}, "response": {"content": {"size": 80_000}}},
            {"startedDateTime": "2024-01-01T00:00:00.150Z", "time": 50,
             "request": {"url": "http://b.example/x.js"}, "response": {"content": {"size": 900}}},
        ]}})
        out = tmp_path / "site.json"
        scenario_out = tmp_path / "site-scenario.json"
        code = main(["ingest-har", "--har", str(har), "--out", str(out),
                     "--scenario-out", str(scenario_out), "--rtt-ms", "40"])
        assert code == EXIT_OK
        assert "edges\t1" in capsys.readouterr().out
        page = load_page(out)
        assert page.name == "site"
        assert page.by_id["t1"].deps == {"t0"}
        assert load_scenario(scenario_out).interfaces[0].rtt_ms == 40

    def test_ingest_har_escenario_sin_rtt(self, tmp_path):
        har = _write_json(tmp_path / "site.har", {"log": {"entries": []}})
        code = main(["ingest-har", "--har", str(har), "--out", str(tmp_path / "o.json"),
                     "--scenario-out", str(tmp_path / "s.json")])
        assert code == EXIT_INVALID

    def test_ingest_har_vacio(self, tmp_path):
        har = _write_json(tmp_path / "site.har", {"log": {"entries": []}})
        assert main(["ingest-har", "--har", str(har), "--out", str(tmp_path / "o.json")]) == EXIT_INVALID

    def test_experiment_y_report(self, page_file, tmp_path, capsys):
        levels = _write_json(tmp_path / "levels.json", {
            "policies": ["if1", "eaf", "if3"], "if1_rtt_ms": [10], "if1_bw_bps": [2e6],
            "if2_rtt_ms": [50, 100], "if2_bw_bps": [5e6],
        })
        out = tmp_path / "out"
        code = main(["experiment", "--pages", str(page_file), "--levels", str(levels), "--out", str(out)])
        assert code == EXIT_OK
        printed = capsys.readouterr().out
        assert "runs\t6" in printed
        assert "errors\t2" in printed
        assert (out / "ecdf_eaf.csv").exists()
        assert not (out / "ecdf_if3.csv").exists()

        again = tmp_path / "again"
        code = main(["report", "--speedups", str(out / "speedups.csv"), "--out", str(again),
                     "--pages", str(page_file)])
        assert code == EXIT_OK
        assert (again / "category_by_factor.csv").read_text() != ""
        assert (again / "pages.csv").exists()

    def test_experiment_sin_paginas(self, tmp_path):
        (tmp_path / "vacio").mkdir()
        code = main(["experiment", "--pages", str(tmp_path / "vacio"), "--levels", "full", "--out", str(tmp_path)])
        assert code == EXIT_INVALID

    def test_metricas_de_la_cli(self, page_file, tmp_path, monkeypatch):
        metrics = tmp_path / "metricas.csv"
        monkeypatch.setenv("SIMULADOR_METRICS_CSV", str(metrics))
        main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "if1"])
        main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "nope"])
        rows = metrics.read_text(encoding="utf-8").splitlines()
        assert len(rows) == 3
        assert rows[1].endswith("success")
        assert rows[2].endswith("error")

    def test_error_interno_sale_con_uno(self, page_file, capsys):
        with patch("simulador.main.run_simulation", side_effect=RuntimeError("fallo inesperado")):
            code = main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "if1"])
        assert code == EXIT_INTERNAL
        err = capsys.readouterr().err
        assert json.loads(err[err.index("{\n"):])["error"]["type"] == "RuntimeError"

    def test_metrica_registrada_por_comando(self, page_file):
        with patch("simulador.main.save_metric") as mock_metric:
            main(["simulate", "--page", str(page_file), "--preset", "symmetric", "--policy", "rr"])
        mock_metric.assert_called_once()
        comando, objetivo, _elapsed, status = mock_metric.call_args.args
        assert (comando, objetivo, status) == ("simulate", "demo", "success")
