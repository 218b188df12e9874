import init, { simulate, explore_set, check_rule, presets } from "./pkg/tandem_wasm.js";

const $ = (id) => document.getElementById(id);
const RULES_CH = ["ch_current_round", "ch_intersection_window(2)", "ch_ever_proposed"];
const RULES_COMP = ["comp_final_round"];
const RULES_ALL = [...RULES_CH, ...RULES_COMP, "absent_before_final"];
const COLORS = { ch: "#c2410c", comp: "#1d4ed8", bound: "#999", target: "#444" };

function fillSelect(el, items) {
  el.innerHTML = "";
  for (const v of items) el.add(new Option(v, v));
}

// Line chart of several series over a shared x axis.
function plot(canvas, xs, series, { yMax, title }) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, L = 48, R = 12, T = 22, B = 24;
  ctx.clearRect(0, 0, W, H);
  const xMax = xs[xs.length - 1] || 1;
  const top = yMax ?? Math.max(...series.flatMap((s) => s.ys.filter(Number.isFinite)), 0.01);
  const px = (x) => L + ((W - L - R) * (x - 1)) / Math.max(xMax - 1, 1);
  const py = (y) => T + (H - T - B) * (1 - Math.min(y, top) / top);

  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#555";
  ctx.font = "11px system-ui";
  ctx.beginPath();
  ctx.moveTo(L, T); ctx.lineTo(L, H - B); ctx.lineTo(W - R, H - B);
  ctx.stroke();
  for (let i = 0; i <= 4; i++) {
    const y = (top * i) / 4;
    ctx.fillText(y.toFixed(2), 4, py(y) + 4);
  }
  ctx.fillText(`day ${xMax}`, W - R - 60, H - 6);
  ctx.fillText(title, L + 4, 14);

  let legendX = L + 12 + ctx.measureText(title).width;
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dash || []);
    ctx.lineWidth = s.width || 1.5;
    ctx.beginPath();
    let started = false;
    s.ys.forEach((y, i) => {
      if (!Number.isFinite(y)) return;
      const x = px(xs[i]), yy = py(y);
      started ? ctx.lineTo(x, yy) : ctx.moveTo(x, yy);
      started = true;
    });
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = s.color;
    ctx.fillText(s.name, legendX, 14);
    legendX += ctx.measureText(s.name).width + 14;
  }
}

function runSimulation() {
  const req = {
    preset: $("sim-preset").value,
    days: Number($("sim-days").value),
    seed: Number($("sim-seed").value),
    epsilon: Number($("sim-eps").value),
    delta: Number($("sim-delta").value),
    eta: Number($("sim-eta").value),
    max_points: 480,
  };
  const out = $("sim-result");
  let c;
  try {
    const t0 = performance.now();
    c = JSON.parse(simulate(JSON.stringify(req)));
    out.innerHTML = `final harm rate ${c.avg_ch.at(-1).toFixed(4)} (target ${c.epsilon}), ` +
      `complement rate ${c.avg_comp.at(-1).toFixed(4)} (target ${c.delta}); ` +
      `bound audit <span class="${c.audit_pass ? "pass" : "fail"}">${c.audit_pass ? "PASS" : "FAIL"}</span>, ` +
      `max τ ${c.max_tau.toFixed(3)}, max λ ${c.max_lambda.toFixed(3)} (cap ${(1 + c.eta).toFixed(2)}), ` +
      `${(performance.now() - t0).toFixed(0)} ms`;
  } catch (e) {
    out.innerHTML = `<span class="fail">${e}</span>`;
    return;
  }
  const flat = (v) => c.t.map(() => v);
  plot($("sim-errors"), c.t, [
    { name: "harm rate", ys: c.avg_ch, color: COLORS.ch },
    { name: "harm bound", ys: c.bound_ch, color: COLORS.ch, dash: [4, 4], width: 1 },
    { name: "ε", ys: flat(c.epsilon), color: COLORS.ch, dash: [1, 3], width: 1 },
    { name: "complement rate", ys: c.avg_comp, color: COLORS.comp },
    { name: "complement bound", ys: c.bound_comp, color: COLORS.comp, dash: [4, 4], width: 1 },
    { name: "δ", ys: flat(c.delta), color: COLORS.comp, dash: [1, 3], width: 1 },
  ], { yMax: Math.min(1, Math.max(c.delta, c.epsilon) * 1.6), title: "running error rates" });
  plot($("sim-thresholds"), c.t, [
    { name: "τ", ys: c.tau, color: COLORS.ch },
    { name: "λ", ys: c.lambda, color: COLORS.comp },
    { name: "cap 1+η", ys: flat(1 + c.eta), color: COLORS.bound, dash: [4, 4], width: 1 },
  ], { yMax: (1 + c.eta) * 1.05, title: "thresholds" });
}

// Explorer state: scores per label and the human's sets per round.
const ex = { scores: [], sets: [] };

function shuffleScores() {
  const k = Number($("ex-k").value);
  ex.scores = Array.from({ length: k }, () => Math.round(Math.random() * 100) / 100);
}

function resizeGrid() {
  const k = Number($("ex-k").value), n = Number($("ex-rounds").value);
  if (ex.scores.length !== k) shuffleScores();
  ex.sets = Array.from({ length: n }, (_, r) => (ex.sets[r] || [0, 1]).filter((y) => y < k));
  const grid = $("ex-grid");
  grid.innerHTML = "";
  const head = grid.insertRow();
  head.insertCell().textContent = "";
  for (let y = 0; y < k; y++) head.insertCell().textContent = `y${y}`;
  ex.sets.forEach((set, r) => {
    const row = grid.insertRow();
    row.insertCell().textContent = `round ${r + 1}`;
    for (let y = 0; y < k; y++) {
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = set.includes(y);
      box.onchange = () => {
        ex.sets[r] = box.checked ? [...ex.sets[r], y].sort((a, b) => a - b) : ex.sets[r].filter((v) => v !== y);
        explore();
      };
      row.insertCell().appendChild(box);
    }
  });
  explore();
}

function explore() {
  const tau = Number($("ex-tau").value), lambda = Number($("ex-lambda").value);
  $("ex-tau-v").textContent = tau.toFixed(2);
  $("ex-lambda-v").textContent = lambda.toFixed(2);
  let r;
  try {
    r = JSON.parse(explore_set(JSON.stringify({
      scores: ex.scores, human_sets: ex.sets,
      rule_ch: $("ex-ch").value, rule_comp: $("ex-comp").value, tau, lambda,
    })));
  } catch (e) {
    $("ex-result").innerHTML = `<span class="fail">${e}</span>`;
    return;
  }
  const canvas = $("ex-bars"), ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, B = 34, T = 10, k = r.labels.length;
  const slot = (W - 20) / k, top = 1.25;
  const py = (v) => T + (H - T - B) * (1 - Math.min(v, top) / top);
  ctx.clearRect(0, 0, W, H);
  ctx.font = "11px system-ui";
  r.labels.forEach((l, y) => {
    const x = 10 + y * slot;
    ctx.fillStyle = l.included ? "#16a34a" : "#d4d4d4";
    ctx.fillRect(x + slot * 0.2, py(l.score), slot * 0.6, H - B - py(l.score));
    ctx.strokeStyle = "#111";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(x + slot * 0.1, py(l.gate)); ctx.lineTo(x + slot * 0.9, py(l.gate));
    ctx.stroke();
    ctx.fillStyle = "#333";
    ctx.fillText(`y${y}`, x + slot * 0.4, H - B + 13);
    const tags = (l.ch ? "H" : "") + (l.comp ? "C" : "");
    ctx.fillStyle = l.ch ? COLORS.ch : COLORS.comp;
    ctx.fillText(tags, x + slot * 0.4, H - 6);
  });
  $("ex-result").textContent = `AI set: {${r.set.map((y) => "y" + y).join(", ")}}. ` +
    "Bars are scores, black ticks are gates; H marks harm-active labels, C complement-active ones.";
}

function runRuleCheck() {
  const out = $("rc-result");
  try {
    const r = JSON.parse(check_rule($("rc-rule").value, Number($("rc-k").value), Number($("rc-rounds").value)));
    let text = `${r.holds ? "PASS" : "FAIL"}  ${r.rule}  (${r.transcripts_checked} transcripts)`;
    for (const c of r.counterexamples) {
      text += `\n  label ${c.label}, round ${c.round}, transcript ${c.transcript.map((h) => "{" + h.join(",") + "}").join(" ")}`;
    }
    out.textContent = text;
    out.className = r.holds ? "pass" : "fail";
  } catch (e) {
    out.textContent = String(e);
    out.className = "fail";
  }
}

async function main() {
  await init();
  fillSelect($("sim-preset"), JSON.parse(presets()));
  fillSelect($("ex-ch"), RULES_CH);
  fillSelect($("ex-comp"), RULES_COMP);
  fillSelect($("rc-rule"), RULES_ALL);
  $("sim-run").onclick = runSimulation;
  $("rc-run").onclick = runRuleCheck;
  $("ex-shuffle").onclick = () => { shuffleScores(); explore(); };
  for (const id of ["ex-k", "ex-rounds"]) $(id).onchange = resizeGrid;
  for (const id of ["ex-ch", "ex-comp", "ex-tau", "ex-lambda"]) $(id).oninput = explore;
  $("status").textContent = "";
  resizeGrid();
  runSimulation();
  runRuleCheck();
}

main().catch((e) => { $("status").textContent = `failed to load: ${e}`; });
