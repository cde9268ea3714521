import init, { profiles, flip_surface, bypass_run, optimal_set } from "./pkg/hammersim_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (n) => (n >= 1e6 ? (n / 1e6).toFixed(2) + "M" : n >= 1e3 ? (n / 1e3).toFixed(0) + "k" : String(n));

let presets = [];
let surface = null;

function colour(v, max) {
  if (v <= 0) return "rgb(20,20,40)";
  const x = Math.min(1, Math.log1p(v) / Math.log1p(max));
  const r = Math.round(255 * Math.min(1, 2 * x));
  const g = Math.round(255 * Math.max(0, 2 * x - 1));
  const b = Math.round(120 * (1 - x));
  return `rgb(${r},${g},${b})`;
}

function draw() {
  const out = JSON.parse(flip_surface($("profile").value, num("tmac"), num("max"), num("points")));
  if (out.error) { $("info").textContent = out.error; return; }
  surface = out;
  const c = $("heat"), ctx = c.getContext("2d");
  const n = out.s.length, w = c.width / n, h = c.height / n;
  const max = Math.max(...out.expected.flat());
  ctx.clearRect(0, 0, c.width, c.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const y = c.height - (i + 1) * h;
      ctx.fillStyle = colour(out.expected[i][j], max);
      ctx.fillRect(j * w, y, w + 0.5, h + 0.5);
      if (out.detected[i][j]) {
        ctx.strokeStyle = "rgba(255,255,255,0.55)";
        ctx.beginPath();
        ctx.moveTo(j * w, y + h);
        ctx.lineTo(j * w + w, y);
        ctx.stroke();
      }
    }
  }
  const p = presets.find((q) => q.name === $("profile").value);
  $("info").textContent =
    `${p.name} (${p.mode}${p.qualitative ? ", qualitative" : ""})\n` +
    `onset ${fmt(Math.round(p.onset_hc))}, saturation ${p.saturation_hc ? fmt(Math.round(p.saturation_hc)) : "never"}\n` +
    `${p.classification}\nmax expected on grid ${max.toFixed(1)}`;
}

function clickRun(ev) {
  if (!surface) return;
  const c = $("heat"), r = c.getBoundingClientRect();
  const n = surface.s.length;
  const j = Math.min(n - 1, Math.floor(((ev.clientX - r.left) / r.width) * n));
  const i = Math.min(n - 1, Math.floor(((r.bottom - ev.clientY) / r.height) * n));
  const s = surface.s[i], t = surface.t[j];
  $("run").textContent = `running S=${fmt(s)} T=${fmt(t)} ...`;
  setTimeout(() => {
    const out = JSON.parse(bypass_run($("profile").value, s, t, num("tmac"), 0));
    if (out.error) { $("run").textContent = out.error; return; }
    const rows = out.flips_per_row.map(([d, k]) => `X${d === 0 ? "" : d > 0 ? "+" + d : d}: ${k}`).join("  ");
    $("run").textContent =
      `S=${fmt(s)} T=${fmt(t)} against per-row t_MAC=${fmt(num("tmac"))}\n` +
      `${out.detected ? `DETECTED (${out.nrr_count} NRRs)` : "not detected"}\n` +
      `flips in X: ${out.flips} (expected ${out.expected_flips.toFixed(1)})\n${rows}`;
  }, 10);
}

function findOptimal() {
  const out = JSON.parse(optimal_set($("profile").value, num("target"), num("max"), num("points")));
  if (out === null) { $("optimal").textContent = "no interior cell beats double-sided on this grid"; return; }
  if (out.error) { $("optimal").textContent = out.error; return; }
  $("optimal").textContent =
    `S=${fmt(out.s)} T=${fmt(out.t)}: ${out.expected_flips.toFixed(1)} expected flips\n` +
    `double-sided needs T=${out.t_dbl === null ? "(beyond grid)" : fmt(out.t_dbl)}` +
    (out.total_ratio === null ? "" : `, total hammers x${out.total_ratio.toFixed(2)}`);
}

await init();
presets = JSON.parse(profiles());
for (const p of presets) $("profile").add(new Option(p.name, p.name));
$("profile").value = "mf-H";
$("draw").onclick = draw;
$("profile").onchange = draw;
$("heat").onclick = clickRun;
$("opt").onclick = findOptimal;
draw();
