/**
 * Payload shapes of the control-plane API (v1) the console consumes.
 */

export interface TriageItem {
  item_id: string;
  trace_id: string;
  query: string;
  expert_selected: string;
  verdict_summary: string;
  status: 'pending' | 'confirmed_error' | 'dismissed';
  sme_expert: string | null;
  sme_rephrasals: string[] | null;
  created_at: string | null;
  consumed_by_cycle: string | null;
}

export interface TraceDetail {
  trace_id: string;
  session_id: string;
  query: string;
  rephrased_query: string;
  query_variations: string[];
  expert_selected: string;
  ir_results: [string, number][];
  response_text: string;
  citations: string[];
  failed_at: string | null;
}

export interface TriageDetail extends TriageItem {
  trace?: TraceDetail;
}

export interface RolloutTransition {
  from_stage: string;
  to_stage: string;
  at: string;
  reason: string;
  canary_pct: number | null;
}

export interface KpiSnapshot {
  accuracy: number;
  latency_ms: number;
  negative_feedback_rate: number;
}

export interface RolloutState {
  task: string;
  active_variant: string;
  candidate_variant: string | null;
  stage: 'idle' | 'shadow' | 'canary' | 'full' | 'rolled_back';
  canary_pct: number | null;
  kpi_window: Record<string, KpiSnapshot>;
  history: RolloutTransition[];
  approval_required: boolean;
  approved: boolean;
}

export interface StageErrorEntry {
  count: number;
  percentage: string;
}

export interface ErrorReport {
  total_negatives: number;
  stages: Record<string, StageErrorEntry>;
  unattributed: StageErrorEntry;
  flagged_trace_ids: string[];
}

export interface DatasetSummary {
  dataset_id: string;
  task: string;
  size: number;
  split_sizes: Record<string, number>;
}

export interface GateDecision {
  decision: string;
  reasons: string[];
  accuracy_delta: number;
  latency_reduction: number;
}

export interface CycleReport {
  cycle_id: string;
  started_at: string;
  duration_ms: number;
  counts: { traces?: number; positives?: number; negatives?: number };
  monitor: { status: string; error?: string | null };
  analyze: {
    status: string;
    error?: string | null;
    error_report?: ErrorReport | null;
    flagged?: number;
  };
  plan: {
    status: string;
    datasets?: DatasetSummary[];
    corrections_consumed?: number;
  };
  execute: {
    status: string;
    gate?: GateDecision;
    transitions?: RolloutTransition[];
  };
}

export interface ApiError {
  code: string;
  message: string;
}

/** The seven expert ids an SME can correct a routing decision to. */
export const EXPERT_IDS = [
  'financial_info',
  'it_benefits_help',
  'sharepoint',
  'holidays',
  'cafe_menu',
  'people',
  'policies',
] as const;

export type ExpertId = (typeof EXPERT_IDS)[number];
