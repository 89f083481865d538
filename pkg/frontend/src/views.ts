/**
 * Pure view renderers: state in, HTML string out. The imperative shell in
 * main.ts owns the DOM and event wiring, which keeps these testable without
 * a browser.
 */

import type {
  CycleReport,
  RolloutState,
  TriageDetail,
  TriageItem,
} from './types.js';
import { EXPERT_IDS } from './types.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

export function renderBanner(message: string | null, kind: 'error' | 'info' = 'error'): string {
  if (!message) return '';
  return `<div class="banner banner-${kind}" role="alert">${escapeHtml(message)}</div>`;
}

// -- triage -------------------------------------------------------------------

export function renderTriageList(items: TriageItem[], openItemId: string | null): string {
  if (items.length === 0) {
    return '<p class="empty">No pending samples. The judge has nothing for you.</p>';
  }
  const rows = items
    .map((item) => {
      const open = item.item_id === openItemId ? ' open' : '';
      return `
      <tr class="triage-row${open}" data-action="open-triage" data-item-id="${item.item_id}">
        <td class="query">${escapeHtml(item.query)}</td>
        <td><code>${escapeHtml(item.expert_selected)}</code></td>
        <td class="verdict">${escapeHtml(item.verdict_summary)}</td>
      </tr>`;
    })
    .join('');
  return `
  <table class="triage-table">
    <thead><tr><th>Query</th><th>Routed to</th><th>Judge reasoning</th></tr></thead>
    <tbody>${rows}</tbody>
  </table>`;
}

export function renderTriageDetail(detail: TriageDetail): string {
  const trace = detail.trace;
  const expertOptions = EXPERT_IDS.map(
    (expert) => `<option value="${expert}">${expert}</option>`,
  ).join('');
  const traceBlock = trace
    ? `
    <dl class="trace">
      <dt>Query</dt><dd>${escapeHtml(trace.query)}</dd>
      <dt>Rephrased</dt><dd>${escapeHtml(trace.rephrased_query)}</dd>
      <dt>Variations</dt><dd>${trace.query_variations.map(escapeHtml).join(' · ') || '—'}</dd>
      <dt>Expert</dt><dd><code>${escapeHtml(trace.expert_selected)}</code></dd>
      <dt>Retrieved</dt><dd>${
        trace.ir_results.map(([docId, score]) => `${escapeHtml(docId)} (${score.toFixed(2)})`).join(', ') || 'nothing'
      }</dd>
      <dt>Response</dt><dd>${escapeHtml(trace.response_text)}</dd>
      <dt>Judge reasoning</dt><dd>${escapeHtml(detail.verdict_summary)}</dd>
    </dl>`
    : `<p class="empty">Trace ${escapeHtml(detail.trace_id)} not available.</p>`;
  return `
  <section class="triage-detail" data-item-id="${detail.item_id}">
    ${traceBlock}
    <form data-action="label-form" data-item-id="${detail.item_id}">
      <label>Correct expert
        <select name="expert"><option value="">— keep unrouted —</option>${expertOptions}</select>
      </label>
      <label>Corrected rephrasals (one per line)
        <textarea name="rephrasals" rows="3" placeholder="leave empty unless correcting a rephrase"></textarea>
      </label>
      <div class="actions">
        <button type="submit" data-action="confirm-label">Confirm error</button>
        <button type="button" data-action="dismiss-item" data-item-id="${detail.item_id}">Dismiss</button>
      </div>
    </form>
  </section>`;
}

// -- rollouts ------------------------------------------------------------------

function stageLabel(state: RolloutState): string {
  if (state.stage === 'canary') return `canary(${state.canary_pct ?? '?'}%)`;
  return state.stage;
}

export function renderRollouts(rollouts: Record<string, RolloutState>): string {
  const tasks = Object.keys(rollouts).sort();
  if (tasks.length === 0) {
    return '<p class="empty">No rollouts yet.</p>';
  }
  return tasks
    .map((task) => {
      const state = rollouts[task];
      const hasCandidate = state.candidate_variant !== null;
      const rolling = hasCandidate && state.stage !== 'idle' && state.stage !== 'rolled_back';
      const approvable =
        rolling && state.stage === 'canary' && state.approval_required && !state.approved;
      const kpis = Object.entries(state.kpi_window)
        .map(
          ([name, kpi]) =>
            `<li>${escapeHtml(name)}: acc ${kpi.accuracy.toFixed(3)}, ` +
            `${kpi.latency_ms.toFixed(0)} ms, neg ${(kpi.negative_feedback_rate * 100).toFixed(1)}%</li>`,
        )
        .join('');
      const history = state.history
        .slice(-8)
        .map(
          (transition) =>
            `<li><code>${escapeHtml(transition.from_stage)} → ${escapeHtml(transition.to_stage)}</code> ` +
            `${escapeHtml(transition.reason)}</li>`,
        )
        .join('');
      return `
      <section class="rollout-card" data-task="${escapeHtml(task)}">
        <h3>${escapeHtml(task)} <span class="stage stage-${state.stage}">${stageLabel(state)}</span></h3>
        <p>active <code>${escapeHtml(state.active_variant)}</code>
           ${hasCandidate ? `· candidate <code>${escapeHtml(state.candidate_variant!)}</code>` : ''}
           ${state.approved ? '· <strong>approved</strong>' : ''}</p>
        <ul class="kpis">${kpis}</ul>
        <div class="actions">
          <button data-action="approve" data-task="${escapeHtml(task)}" ${approvable ? '' : 'disabled'}>
            Approve
          </button>
          <button data-action="rollback" data-task="${escapeHtml(task)}" ${rolling ? '' : 'disabled'}>
            Rollback
          </button>
        </div>
        <ol class="history">${history}</ol>
      </section>`;
    })
    .join('');
}

// -- cycle report -----------------------------------------------------------------

export function renderReport(report: CycleReport | null): string {
  if (!report) {
    return '<p class="empty">No cycle reports yet. Run a cycle to populate this view.</p>';
  }
  const counts = report.counts;
  const errorReport = report.analyze.error_report;
  let breakdown = '<p class="empty">No negatives analyzed in this window.</p>';
  if (errorReport) {
    const rows = Object.entries(errorReport.stages)
      .concat([['unattributed', errorReport.unattributed]])
      .map(([stage, entry]) => {
        const pct = Number.parseFloat(entry.percentage);
        return `
        <div class="bar-row">
          <span class="bar-label">${escapeHtml(stage)}</span>
          <div class="bar"><div class="bar-fill" style="width: ${pct}%"></div></div>
          <span class="bar-value">${entry.count} (${entry.percentage}%)</span>
        </div>`;
      })
      .join('');
    breakdown = `<div class="breakdown">${rows}</div>`;
  }
  const datasets = (report.plan.datasets ?? [])
    .map((dataset) => {
      const sizes = Object.entries(dataset.split_sizes)
        .map(([name, size]) => `${name} ${size}`)
        .join(' / ');
      return `<li><code>${escapeHtml(dataset.dataset_id)}</code> (${escapeHtml(dataset.task)}): ${dataset.size} examples — ${sizes}</li>`;
    })
    .join('');
  const gateInfo = report.execute.gate;
  const gateBlock = gateInfo
    ? `<p class="gate gate-${gateInfo.decision}">gate: <strong>${escapeHtml(gateInfo.decision)}</strong>
       (Δacc ${(gateInfo.accuracy_delta * 100).toFixed(1)} pp, latency −${(gateInfo.latency_reduction * 100).toFixed(0)}%)</p>`
    : '';
  return `
  <section class="report">
    <h3>cycle <code>${escapeHtml(report.cycle_id)}</code></h3>
    <p>traces ${counts.traces ?? 0} · positives ${counts.positives ?? 0} · negatives ${counts.negatives ?? 0}</p>
    ${breakdown}
    <h4>datasets</h4>
    <ul>${datasets || '<li class="empty">none built</li>'}</ul>
    ${gateBlock}
  </section>`;
}
