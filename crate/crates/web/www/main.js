import init, { parse_verdict, fuse, lora_demo } from "./pkg/phishbench_web.js";

const $ = (id) => document.getElementById(id);

function escape(s) {
  return s.replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]);
}

function verdictTag(v) {
  return `<span class="verdict-${v}">${v}</span>`;
}

function showError(el, out) {
  if (out.error) {
    el.innerHTML = `<pre>${escape(out.error)}</pre>`;
    return true;
  }
  return false;
}

function runParse() {
  const text = $("completion").value;
  const out = JSON.parse(parse_verdict(text, $("delimiter").value, $("positive").value, $("negative").value));
  if (showError($("parse-out"), out)) return;
  let highlighted = escape(text);
  if (out.answer_span) {
    // span offsets are UTF-8 bytes; map them back to string indices
    const bytes = new TextEncoder().encode(text);
    const dec = new TextDecoder();
    const [a, b] = out.answer_span;
    const pre = dec.decode(bytes.slice(0, a));
    const mid = dec.decode(bytes.slice(a, b));
    const post = dec.decode(bytes.slice(b));
    highlighted = `${escape(pre)}<mark>${escape(mid)}</mark>${escape(post)}`;
  }
  $("parse-out").innerHTML =
    `<p>${verdictTag(out.verdict)} via <code>${out.mode}</code></p><pre>${highlighted}</pre>`;
}

const defaultMembers = [
  ["model-a", "Urgent tone and a credential form. ###Phishing###", "-0.21, -0.05, -0.4"],
  ["model-b", "Routine shipping notice. ###Safe###", "-0.02, -0.01"],
  ["model-c", "Hard to say.", "-1.2, -0.9"],
];

function addMember([model, text, lps] = ["", "", ""]) {
  const row = $("members").insertRow();
  row.innerHTML =
    `<td><input type="text" value="${escape(model)}"></td>` +
    `<td><textarea rows="2" cols="44">${escape(text)}</textarea></td>` +
    `<td><input type="text" style="width:12rem" value="${escape(lps)}"></td>`;
}

function runFuse() {
  const rows = [...$("members").rows].slice(1);
  const members = rows.map((r) => {
    const [m, t, l] = r.querySelectorAll("input, textarea");
    const logprobs = l.value.split(",").map((s) => s.trim()).filter(Boolean).map(Number);
    return { model: m.value, text: t.value, logprobs };
  });
  const out = JSON.parse(fuse(JSON.stringify(members)));
  if (showError($("fuse-out"), out)) return;
  const conf = (c) => (c == null ? "n/a" : c.toFixed(4));
  const table = out.members
    .map((m) => `<tr><td>${escape(m.model)}</td><td>${verdictTag(m.verdict)}</td><td>${m.mode}</td><td>${conf(m.ln_confidence)}</td></tr>`)
    .join("");
  const decision = (name, d) =>
    d.error
      ? `<p>${name}: ${escape(d.error)}</p>`
      : `<p>${name}: ${verdictTag(d.verdict)}${d.tie_broken ? " (tie broken)" : ""}${d.winning_member ? ` from ${escape(d.winning_member)}` : ""}</p>`;
  $("fuse-out").innerHTML =
    `<table><tr><th>model</th><th>verdict</th><th>parse</th><th>confidence</th></tr>${table}</table>` +
    decision("majority", out.majority) +
    decision("confidence", out.confidence);
}

function runLora() {
  const n = (id) => Number($(id).value);
  const out = JSON.parse(lora_demo(n("d"), n("k"), n("r"), n("seed"), n("steps")));
  if (showError($("lora-out"), out)) return;
  const s = out.savings;
  $("lora-out").innerHTML = `<pre>merge rel error   ${out.merge_rel_error.toExponential(2)}
grad check        ${out.grad_check.max_rel_error.toExponential(2)} over ${out.grad_check.entries} entries
loss              ${out.losses.map((l) => l.toFixed(4)).join(" → ")}
frozen weight     ${out.base_unchanged ? "unchanged" : "CHANGED"} (${out.base_checksum.slice(0, 16)}…)
parameters        full ${s.full_count}, adapter ${s.lora_count}, ratio ${s.ratio.toFixed(4)}</pre>`;
}

await init();
$("status").textContent = "";
defaultMembers.forEach(addMember);
for (const id of ["completion", "delimiter", "positive", "negative"]) $(id).addEventListener("input", runParse);
$("add-member").addEventListener("click", () => addMember());
$("fuse").addEventListener("click", runFuse);
$("run-lora").addEventListener("click", runLora);
runParse();
runFuse();
runLora();
